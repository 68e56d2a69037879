"""Recall evaluation restricted to persons co-visible across views.

A person counts toward a destination view's denominator only when it has
ground truth in both the reference view and that destination view of the
same frame; people visible in a single view are ignored.  Detections are
matched to ground truth greedily in descending objectness order, one to
one, at a configurable IoU threshold.  Reports carry clean recall,
patched recall, and their relative difference in percent.
"""

import os
import tempfile
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .geometry import GeometryError
from .imaging import PatchPlacement, EmptyIntersection, place_patch, project_patch, write_png
from .parallel import parallel_map


class EvaluationError(Exception):
    pass


class EmptyDenominator(EvaluationError):
    """No co-visible persons; recall is undefined, not zero."""


class UndefinedForZeroClean(EvaluationError):
    """Relative difference is undefined when clean recall is zero."""


class MissingHomography(EvaluationError):
    """No transform available for a (frame, view-pair) the experiment needs."""


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated person in one view of one frame.

    person_id is globally consistent across views, which is what makes
    cross-view co-visibility computable.
    """

    view_id: int
    frame_id: int
    person_id: int
    bbox: object


@dataclass(frozen=True)
class RecallReport:
    """Per-view clean/patched recall percentages and their difference.

    Fields are None when undefined (no co-visible persons, or zero clean
    recall for the difference); they are rendered as "n/a", never as 0.
    """

    view_id: int
    clean_recall: float
    patched_recall: float
    difference: float


def iou(a, b):
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def match_detections(dets, gts, iou_thresh=0.5, conf_thresh=0.5):
    """Greedy one-to-one matching; returns the set of matched person ids.

    Detections at or above the confidence threshold are processed in
    descending objectness order (stable for ties); each claims the still
    unmatched ground truth with the highest IoU >= iou_thresh, ties on IoU
    going to the lower person id.
    """
    ordered = sorted(
        (d for d in dets if d.objectness >= conf_thresh),
        key=lambda d: -d.objectness,
    )
    matched = set()
    for det in ordered:
        best = None
        best_key = None
        for gt in gts:
            if gt.person_id in matched:
                continue
            overlap = iou(det.bbox, gt.bbox)
            if overlap < iou_thresh:
                continue
            key = (overlap, -gt.person_id)
            if best_key is None or key > best_key:
                best = gt
                best_key = key
        if best is not None:
            matched.add(best.person_id)
    return matched


def _persons_by_view_frame(gts):
    table = {}
    for gt in gts:
        table.setdefault((gt.view_id, gt.frame_id), set()).add(gt.person_id)
    return table


def cross_view_recall(matched, gts, ref_view, dst_view):
    """Recall over persons present in both the reference and destination view.

    ``matched`` maps (view_id, frame_id) to the set of matched person ids in
    that view/frame.  The denominator counts, frame by frame, the persons
    with ground truth in both views; the numerator counts those among them
    matched in the destination view.  Raises EmptyDenominator when no
    person is co-visible.
    """
    persons = _persons_by_view_frame(gts)
    frames = sorted(
        {f for v, f in persons if v == ref_view} | {f for v, f in persons if v == dst_view}
    )
    num = 0
    denom = 0
    for f in frames:
        covisible = persons.get((ref_view, f), set()) & persons.get((dst_view, f), set())
        denom += len(covisible)
        num += len(covisible & matched.get((dst_view, f), set()))
    if denom == 0:
        raise EmptyDenominator(
            f"no persons co-visible in views {ref_view} and {dst_view}"
        )
    return 100.0 * num / denom


def round_half_up(value, decimals=2):
    """Decimal round-half-up, as used for all reported percentages."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def difference_pct(clean, patched):
    """Relative recall change in percent, rounded half-up to 2 decimals."""
    if clean <= 0.0:
        raise UndefinedForZeroClean("difference is undefined for zero clean recall")
    return round_half_up((patched - clean) / clean * 100.0)


class HomographyLookup:
    """Reference-to-destination transforms, static per view or per frame."""

    def __init__(self, static=None, per_frame=None):
        self._static = dict(static or {})
        self._per_frame = dict(per_frame or {})

    def get(self, frame_id, dst_view):
        if (frame_id, dst_view) in self._per_frame:
            return self._per_frame[(frame_id, dst_view)]
        if dst_view in self._static:
            return self._static[dst_view]
        raise MissingHomography(
            f"no homography for frame {frame_id} into view {dst_view}"
        )


def run_experiment(
    dataset,
    gts,
    patch,
    ref_view,
    destination_views,
    homographies,
    detector,
    *,
    iou_thresh=0.5,
    conf_thresh=0.5,
    patch_scale=0.5,
    patch_anchor=(0.5, 0.5),
    out_dir=None,
    jobs=1,
):
    """Composite, project, detect, and score one experiment.

    For every frame: the patch is composited onto each annotated person in
    the reference view, then projected into every destination view through
    that frame's transform.  Clean and patched variants of every view are
    written under ``out_dir`` (a temporary directory if None) and the
    detector runs on those files.  Returns one RecallReport per view,
    reference view first.

    ``dataset`` must expose ``frames`` (ids) and ``load_frame(view, frame)``.
    """
    views = [ref_view] + [v for v in destination_views]
    frames = list(dataset.frames)
    gts_by_vf = {}
    for gt in gts:
        gts_by_vf.setdefault((gt.view_id, gt.frame_id), []).append(gt)

    cleanup = None
    if out_dir is None:
        cleanup = tempfile.TemporaryDirectory(prefix="mvpatch-eval-")
        out_dir = cleanup.name

    def frame_path(variant, view, frame):
        return os.path.join(out_dir, variant, f"view{view}", f"frame{frame}.png")

    def render(frame_id):
        ref_frame = dataset.load_frame(ref_view, frame_id)
        patched_ref = ref_frame
        quads = []
        boxes = sorted(
            gts_by_vf.get((ref_view, frame_id), []), key=lambda g: g.person_id
        )
        for gt in boxes:
            placement = PatchPlacement(gt.bbox, scale=patch_scale, anchor=patch_anchor)
            try:
                patched_ref, quad = place_patch(patched_ref, patch, placement)
            except EmptyIntersection:
                continue
            quads.append(quad)
        _write_variant(frame_path("clean", ref_view, frame_id), ref_frame)
        _write_variant(frame_path("patched", ref_view, frame_id), patched_ref)
        for dst in destination_views:
            h = homographies.get(frame_id, dst)
            dst_frame = dataset.load_frame(dst, frame_id)
            patched_dst = dst_frame
            for quad in quads:
                patched_dst = project_patch(patched_dst, patched_ref, quad, h)
            _write_variant(frame_path("clean", dst, frame_id), dst_frame)
            _write_variant(frame_path("patched", dst, frame_id), patched_dst)

    parallel_map(render, frames, jobs)

    # One ordered pass over every rendered file keeps bridge traffic batched
    # and the detection order deterministic.
    keys = [
        (variant, view, frame)
        for variant in ("clean", "patched")
        for view in views
        for frame in frames
    ]
    paths = [frame_path(*k) for k in keys]
    detections = detector.detect_files(paths)

    matched = {"clean": {}, "patched": {}}
    for (variant, view, frame), dets in zip(keys, detections):
        matched[variant][(view, frame)] = match_detections(
            dets, gts_by_vf.get((view, frame), []), iou_thresh, conf_thresh
        )

    reports = []
    for view in views:
        clean = _recall_or_none(matched["clean"], gts, ref_view, view)
        patched = _recall_or_none(matched["patched"], gts, ref_view, view)
        difference = None
        if clean is not None and patched is not None and clean > 0.0:
            difference = difference_pct(clean, patched)
        reports.append(
            RecallReport(
                view_id=view,
                clean_recall=clean,
                patched_recall=patched,
                difference=difference,
            )
        )
    if cleanup is not None:
        cleanup.cleanup()
    return reports


def _write_variant(path, image):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    write_png(image, path)


def _recall_or_none(matched, gts, ref_view, view):
    try:
        return round_half_up(cross_view_recall(matched, gts, ref_view, view))
    except EmptyDenominator:
        return None


# ---------------------------------------------------------------------------
# report output


def _fmt(value):
    return "n/a" if value is None else f"{value:.2f}"


def reports_to_csv(reports):
    lines = ["view,clean_recall,patched_recall,difference_pct"]
    for r in reports:
        lines.append(
            f"{r.view_id},{_fmt(r.clean_recall)},{_fmt(r.patched_recall)},{_fmt(r.difference)}"
        )
    return "\n".join(lines) + "\n"


def format_report_table(reports, ref_view=None):
    """Aligned text table: view, clean recall, patched recall, difference."""
    header = ("View", "Clean Recall", "Patched Recall", "Difference (%)")
    rows = []
    for r in reports:
        label = f"{r.view_id} (ref)" if r.view_id == ref_view else str(r.view_id)
        rows.append(
            (label, _fmt(r.clean_recall), _fmt(r.patched_recall), _fmt(r.difference))
        )
    widths = [
        max(len(header[i]), *(len(row[i]) for row in rows)) if rows else len(header[i])
        for i in range(4)
    ]
    out = ["  ".join(header[i].ljust(widths[i]) for i in range(4)).rstrip()]
    for row in rows:
        out.append("  ".join(row[i].ljust(widths[i]) for i in range(4)).rstrip())
    return "\n".join(out) + "\n"
