"""Multi-view dataset loading and the synthetic test rig generator.

All on-disk formats are plain text with '#' comments so that manually
curated files (especially correspondence points) stay easy to diff:

  manifest        key = value lines: views, frames, frame_pattern,
                  annotations, correspondences.<ref>.<dst>[.<frame>]
  annotations     CSV rows: view_id,frame_id,person_id,xmin,ymin,xmax,ymax
  correspondences CSV rows: x_ref,y_ref,x_dst,y_dst

Loaders validate eagerly and reject rather than repair; every error names
the file and line.  The synthetic rig renders the toy detector's template
as its "persons", warps the reference view into the destination views
through known transforms, and emits correspondence files that sample those
transforms exactly, so geometry can be recovered to machine precision.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import TEMPLATE_SIZE, DEFAULT_TEMPLATE_SEED, ToyDetectorSpec
from .evaluation import GroundTruthBox
from .geometry import Correspondence, Homography, Point2, TooFewPoints, map_points
from .imaging import BBox, ImageBuffer, read_png, warp_image, write_png


class DatasetError(Exception):
    pass


class ParseError(DatasetError):
    """Malformed input; the message names the file and line."""


class MissingFile(DatasetError):
    """A referenced file does not exist; the message names the path."""


class DuplicateFrame(DatasetError):
    """Two manifest entries resolve to the same (view, frame)."""


class InvalidBox(DatasetError):
    """An annotation row carries an inverted or empty box."""


@dataclass(frozen=True)
class ViewSetConfig:
    """Reference view plus the destination views a patch face is seen from."""

    reference_view: int
    destination_views: tuple

    def __post_init__(self):
        dsts = tuple(self.destination_views)
        if self.reference_view in dsts:
            raise ValueError("reference view must not appear in destination views")
        if len(set(dsts)) != len(dsts):
            raise ValueError("duplicate destination views")
        object.__setattr__(self, "destination_views", dsts)

    def require_views(self, available):
        missing = [v for v in (self.reference_view, *self.destination_views) if v not in available]
        if missing:
            raise ParseError(f"views {missing} not present in the dataset")


@dataclass(frozen=True)
class DatasetManifest:
    """Validated description of an on-disk multi-view dataset."""

    root: Path
    views: tuple
    frames: tuple
    frame_pattern: str
    annotations_path: Path
    correspondence_paths: dict  # (ref, dst) -> path
    per_frame_correspondence_paths: dict  # (ref, dst, frame) -> path

    def frame_file(self, view, frame):
        return self.root / self.frame_pattern.format(view=view, frame=frame)

    def load_frame(self, view, frame):
        return read_png(self.frame_file(view, frame))

    def load_annotations(self):
        return load_annotations(self.annotations_path)


def _iter_content_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise MissingFile(f"{path}: no such file") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield lineno, stripped


def _parse_int_list(value, path, lineno):
    """Comma-separated ints, with 'a..b' inclusive range shorthand."""
    items = []
    for token in value.split(","):
        token = token.strip()
        if not token:
            continue
        if ".." in token:
            lo, _, hi = token.partition("..")
            try:
                items.extend(range(int(lo), int(hi) + 1))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad range '{token}'") from exc
        else:
            try:
                items.append(int(token))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad integer '{token}'") from exc
    return items


def load_manifest(path):
    """Load and eagerly validate a dataset manifest."""
    path = Path(path)
    root = path.parent
    views = None
    frames = None
    frame_pattern = None
    annotations = None
    corr = {}
    corr_per_frame = {}

    for lineno, line in _iter_content_lines(path):
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "views":
            views = _parse_int_list(value, path, lineno)
        elif key == "frames":
            frames = _parse_int_list(value, path, lineno)
        elif key == "frame_pattern":
            frame_pattern = value
        elif key == "annotations":
            annotations = root / value
        elif key.startswith("correspondences."):
            parts = key.split(".")[1:]
            if len(parts) == 2:
                try:
                    corr[(int(parts[0]), int(parts[1]))] = root / value
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad view pair '{key}'") from exc
            elif len(parts) == 3:
                try:
                    corr_per_frame[(int(parts[0]), int(parts[1]), int(parts[2]))] = root / value
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad key '{key}'") from exc
            else:
                raise ParseError(f"{path}:{lineno}: bad correspondences key '{key}'")
        else:
            raise ParseError(f"{path}:{lineno}: unknown key '{key}'")

    for name, value in (
        ("views", views),
        ("frames", frames),
        ("frame_pattern", frame_pattern),
        ("annotations", annotations),
    ):
        if value is None:
            raise ParseError(f"{path}: missing required key '{name}'")
    if len(set(views)) != len(views):
        raise DuplicateFrame(f"{path}: duplicate view ids in 'views'")
    if len(set(frames)) != len(frames):
        raise DuplicateFrame(f"{path}: duplicate frame ids in 'frames'")

    manifest = DatasetManifest(
        root=root,
        views=tuple(views),
        frames=tuple(frames),
        frame_pattern=frame_pattern,
        annotations_path=annotations,
        correspondence_paths=corr,
        per_frame_correspondence_paths=corr_per_frame,
    )

    seen = {}
    for view in manifest.views:
        for frame in manifest.frames:
            f = manifest.frame_file(view, frame)
            if not f.is_file():
                raise MissingFile(f"{f}: frame image referenced by manifest is missing")
            resolved = f.resolve()
            if resolved in seen:
                raise DuplicateFrame(
                    f"{path}: view {view} frame {frame} and view/frame "
                    f"{seen[resolved]} resolve to the same file {f}"
                )
            seen[resolved] = (view, frame)
    if not manifest.annotations_path.is_file():
        raise MissingFile(f"{manifest.annotations_path}: annotation file is missing")
    for p in (*corr.values(), *corr_per_frame.values()):
        if not p.is_file():
            raise MissingFile(f"{p}: correspondence file is missing")
    return manifest


def save_manifest(manifest, path):
    path = Path(path)
    lines = [
        "# mvpatch dataset manifest",
        "views = " + ", ".join(str(v) for v in manifest.views),
        "frames = " + ", ".join(str(f) for f in manifest.frames),
        f"frame_pattern = {manifest.frame_pattern}",
        f"annotations = {manifest.annotations_path.relative_to(path.parent)}",
    ]
    for (a, b), p in sorted(manifest.correspondence_paths.items()):
        lines.append(f"correspondences.{a}.{b} = {p.relative_to(path.parent)}")
    for (a, b, f), p in sorted(manifest.per_frame_correspondence_paths.items()):
        lines.append(f"correspondences.{a}.{b}.{f} = {p.relative_to(path.parent)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_annotations(path):
    """Parse ground-truth boxes; person ids are consistent across views."""
    boxes = []
    seen = set()
    for lineno, line in _iter_content_lines(path):
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 7:
            raise ParseError(f"{path}:{lineno}: expected 7 fields, got {len(fields)}")
        try:
            view_id, frame_id, person_id = (int(f) for f in fields[:3])
            xmin, ymin, xmax, ymax = (float(f) for f in fields[3:])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if not (xmin < xmax and ymin < ymax):
            raise InvalidBox(
                f"{path}:{lineno}: invalid box ({xmin}, {ymin}, {xmax}, {ymax})"
            )
        key = (view_id, frame_id, person_id)
        if key in seen:
            raise ParseError(
                f"{path}:{lineno}: duplicate (view, frame, person) {key}"
            )
        seen.add(key)
        boxes.append(
            GroundTruthBox(
                view_id=view_id,
                frame_id=frame_id,
                person_id=person_id,
                bbox=BBox(xmin, ymin, xmax, ymax),
            )
        )
    return boxes


def save_annotations(boxes, path):
    lines = ["# view_id,frame_id,person_id,xmin,ymin,xmax,ymax"]
    for gt in boxes:
        b = gt.bbox
        lines.append(
            f"{gt.view_id},{gt.frame_id},{gt.person_id},"
            f"{b.xmin!r},{b.ymin!r},{b.xmax!r},{b.ymax!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_correspondences(path):
    """Parse manually selected point pairs; at least four are required."""
    pairs = []
    for lineno, line in _iter_content_lines(path):
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
        try:
            xr, yr, xd, yd = (float(f) for f in fields)
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
        if not all(math.isfinite(v) for v in (xr, yr, xd, yd)):
            raise ParseError(f"{path}:{lineno}: non-finite coordinate")
        pairs.append(Correspondence(Point2(xr, yr), Point2(xd, yd)))
    if len(pairs) < 4:
        raise TooFewPoints(f"{path}: need at least 4 correspondences, got {len(pairs)}")
    return pairs


def save_correspondences(pairs, path):
    lines = ["# x_ref,y_ref,x_dst,y_dst"]
    for c in pairs:
        lines.append(f"{c.ref.x!r},{c.ref.y!r},{c.dst.x!r},{c.dst.y!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic rig


@dataclass(frozen=True)
class SyntheticRigSpec:
    """Desk-scale multi-view dataset description.

    Destination views are exact perspective warps of the reference view;
    homographies default to near-grid-aligned mild transforms so the toy
    template stays detectable after warping.
    """

    width: int = 128
    height: int = 96
    n_views: int = 2
    n_frames: int = 20
    persons_per_frame: int = 2
    seed: int = 0
    template_seed: int = DEFAULT_TEMPLATE_SEED
    homographies: tuple = ()  # one per destination view; defaults if empty

    def __post_init__(self):
        if self.width < 48 or self.height < 48:
            raise ValueError("rig frames must be at least 48x48")
        if self.n_views < 1 or self.n_frames < 1 or self.persons_per_frame < 1:
            raise ValueError("views, frames, and persons must all be >= 1")
        hs = tuple(self.homographies)
        if hs and len(hs) != self.n_views - 1:
            raise ValueError(
                f"need {self.n_views - 1} homographies for {self.n_views} views, got {len(hs)}"
            )
        object.__setattr__(self, "homographies", hs)

    def resolved_homographies(self):
        if self.homographies:
            return self.homographies
        return default_rig_homographies(self.n_views - 1)


# Translation snapped to the toy detector's stride plus gentle shear and
# perspective, keeping warped templates within a fraction of a pixel of a
# stride-aligned window.
_RIG_H_PARAMS = [
    (16.0, 8.0, 0.002, 0.000, 1.5e-5, -1.0e-5),
    (-8.0, 16.0, -0.003, 0.001, -1.0e-5, 2.0e-5),
    (24.0, -8.0, 0.004, -0.002, 2.0e-5, 1.0e-5),
    (-16.0, -8.0, 0.001, 0.003, -2.0e-5, -1.5e-5),
    (8.0, 24.0, -0.002, -0.001, 1.0e-5, 1.5e-5),
    (-24.0, 8.0, 0.003, 0.002, -1.5e-5, -2.0e-5),
]


def default_rig_homographies(n):
    hs = []
    for i in range(n):
        tx, ty, shx, shy, p31, p32 = _RIG_H_PARAMS[i % len(_RIG_H_PARAMS)]
        m = np.array(
            [
                [1.0, shx, tx],
                [shy, 1.0, ty],
                [p31, p32, 1.0],
            ]
        )
        hs.append(Homography(m))
    return tuple(hs)


def _box_corners(x, y, size):
    return np.array(
        [[x, y], [x + size, y], [x + size, y + size], [x, y + size]], dtype=float
    )


def _hull(points):
    return BBox(
        float(points[:, 0].min()),
        float(points[:, 1].min()),
        float(points[:, 0].max()),
        float(points[:, 1].max()),
    )


def _place_person_boxes(rng, spec, homographies):
    """Stride-aligned, non-overlapping boxes that stay in-frame in every view."""
    size = TEMPLATE_SIZE
    grid = 8
    margin = 2
    boxes = []
    attempts = 0
    while len(boxes) < spec.persons_per_frame:
        attempts += 1
        if attempts > 2000:
            raise ValueError(
                "could not place persons; rig too small for the requested count"
            )
        x = grid * int(rng.integers(1, (spec.width - size) // grid))
        y = grid * int(rng.integers(1, (spec.height - size) // grid))
        corners = _box_corners(x, y, size)
        ok = True
        for h in homographies:
            hull = _hull(map_points(h, corners))
            if (
                hull.xmin < margin
                or hull.ymin < margin
                or hull.xmax > spec.width - 1 - margin
                or hull.ymax > spec.height - 1 - margin
            ):
                ok = False
                break
        for bx, by in boxes:
            if abs(bx - x) < size + grid and abs(by - y) < size + grid:
                ok = False
                break
        if ok:
            boxes.append((x, y))
    return boxes


def generate_synthetic_rig(spec, out_dir):
    """Write a complete rig (frames, annotations, correspondences, manifest).

    Fully seeded: the same spec produces a bit-identical tree.  Returns the
    loaded, validated manifest.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = ToyDetectorSpec.from_seed(spec.template_seed).template
    homographies = spec.resolved_homographies()
    views = tuple(range(1, spec.n_views + 1))
    frames = tuple(range(spec.n_frames))
    rng = np.random.default_rng(spec.seed)

    annotations = []
    for view in views:
        (out / f"view{view}").mkdir(exist_ok=True)
    for frame in frames:
        boxes = _place_person_boxes(rng, spec, homographies)
        canvas = np.zeros((spec.height, spec.width, 3))
        for x, y in boxes:
            canvas[y : y + TEMPLATE_SIZE, x : x + TEMPLATE_SIZE, :] = template[..., None]
        ref_frame = ImageBuffer(canvas)
        write_png(ref_frame, out / "view1" / f"frame{frame}.png")
        for pid, (x, y) in enumerate(boxes):
            annotations.append(
                GroundTruthBox(
                    view_id=1,
                    frame_id=frame,
                    person_id=pid,
                    bbox=BBox(float(x), float(y), float(x + TEMPLATE_SIZE), float(y + TEMPLATE_SIZE)),
                )
            )
        for i, h in enumerate(homographies):
            view = i + 2
            warped, _ = warp_image(ref_frame, h, spec.width, spec.height)
            write_png(warped, out / f"view{view}" / f"frame{frame}.png")
            for pid, (x, y) in enumerate(boxes):
                hull = _hull(map_points(h, _box_corners(x, y, TEMPLATE_SIZE)))
                annotations.append(
                    GroundTruthBox(
                        view_id=view, frame_id=frame, person_id=pid, bbox=hull
                    )
                )

    save_annotations(annotations, out / "annotations.csv")

    (out / "corr").mkdir(exist_ok=True)
    corr_paths = {}
    grid_x = np.linspace(10.0, spec.width - 10.0, 6)
    grid_y = np.linspace(10.0, spec.height - 10.0, 3)
    ref_pts = np.array([[x, y] for y in grid_y for x in grid_x])
    for i, h in enumerate(homographies):
        view = i + 2
        dst_pts = map_points(h, ref_pts)
        pairs = [
            Correspondence(Point2(*rp), Point2(*dp))
            for rp, dp in zip(ref_pts, dst_pts)
        ]
        p = out / "corr" / f"ref1_dst{view}.csv"
        save_correspondences(pairs, p)
        corr_paths[(1, view)] = p
        # ground-truth transform, for diagnostics and oracle tests
        np.savetxt(out / "corr" / f"true_h_1_{view}.txt", h.matrix.reshape(-1))

    manifest = DatasetManifest(
        root=out,
        views=views,
        frames=frames,
        frame_pattern="view{view}/frame{frame}.png",
        annotations_path=out / "annotations.csv",
        correspondence_paths=corr_paths,
        per_frame_correspondence_paths={},
    )
    save_manifest(manifest, out / "manifest.txt")
    return load_manifest(out / "manifest.txt")
