"""Adam-based patch training.

Each iteration draws a minibatch of annotated frames (with replacement,
seeded), composites the current patch into every person box, scores the
frames with a grad-capable detector, routes the image gradient back to
patch pixels through the bilinear placement adjoint, adds the printability
and smoothness gradients, and takes one clamped Adam step.  Everything is
seeded, so identical configs produce bit-identical patches.
"""

from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorCapabilityError
from .imaging import BBox, ImageBuffer, PatchPlacement, place_patch_recorded
from .loss import (
    LossBreakdown,
    LossWeights,
    PrintableColorSet,
    combine_gradients,
    nps_score,
    tv_score,
)
from .parallel import parallel_map

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerError(Exception):
    pass


class ShapeMismatch(OptimizerError):
    """Gradient, moment, and patch shapes disagree."""


class MissingForwardRecord(OptimizerError):
    """Placement backprop called without the forward-pass record."""


@dataclass(frozen=True)
class TrainConfig:
    """Patch training hyperparameters."""

    patch_w: int = 300
    patch_h: int = 300
    minibatch: int = 4
    lr: float = 0.03
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 1000
    seed: int = 0
    patch_scale: float = 0.5
    patch_anchor: tuple = (0.5, 0.5)
    jobs: int = 1

    def __post_init__(self):
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class AdamState:
    """First/second moment rasters and the step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape):
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0)


@dataclass(frozen=True)
class TrainSample:
    """One training frame plus the person boxes the patch goes into."""

    frame: ImageBuffer
    person_bboxes: tuple

    def __post_init__(self):
        boxes = tuple(self.person_bboxes)
        if not boxes:
            raise ValueError("a training sample needs at least one person box")
        for b in boxes:
            if not isinstance(b, BBox):
                raise TypeError("person_bboxes must contain BBox values")
        object.__setattr__(self, "person_bboxes", boxes)


def init_patch(w, h, seed):
    """Uniform-random starting patch; same seed gives an identical buffer."""
    if w < 2 or h < 2:
        raise ValueError(f"patch must be at least 2x2, got {w}x{h}")
    values = np.random.default_rng(seed).random((h, w, 3))
    return ImageBuffer(values)


def adam_step(state, grad, patch, lr):
    """One bias-corrected Adam update on the patch, clamped to [0, 1]."""
    p = patch.data
    if grad.shape != p.shape or state.m.shape != p.shape:
        raise ShapeMismatch(
            f"patch {p.shape}, grad {grad.shape}, moments {state.m.shape}"
        )
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    updated = np.clip(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), 0.0, 1.0)
    return AdamState(m=m, v=v, t=t), ImageBuffer(updated)


def backprop_through_placement(frame_grad, record):
    """Adjoint of the bilinear placement: push a frame gradient to patch pixels.

    Each placed frame pixel distributes its gradient to the (up to) four
    patch pixels it sampled, with the same bilinear weights used forward.
    Frame pixels outside the placed rect contribute nothing.
    """
    if record is None:
        raise MissingForwardRecord("place_patch geometry record is required")
    g = frame_grad[record.y0 : record.y1, record.x0 : record.x1, :]
    ph, pw = record.patch_height, record.patch_width

    u, v = np.meshgrid(record.us, record.vs)
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    x1 = np.minimum(x0 + 1, pw - 1)
    y1 = np.minimum(y0 + 1, ph - 1)

    out = np.zeros((ph, pw, 3))
    np.add.at(out, (y0, x0), g * (1.0 - fx) * (1.0 - fy))
    np.add.at(out, (y0, x1), g * fx * (1.0 - fy))
    np.add.at(out, (y1, x0), g * (1.0 - fx) * fy)
    np.add.at(out, (y1, x1), g * fx * fy)
    return out


def _objectness_forward_backward(sample, patch, detector, cfg):
    """Max objectness of one patched frame and its gradient w.r.t. the patch."""
    frame = sample.frame
    records = []
    for bbox in sample.person_bboxes:
        placement = PatchPlacement(bbox, scale=cfg.patch_scale, anchor=cfg.patch_anchor)
        frame, _, record = place_patch_recorded(frame, patch, placement)
        records.append(record)
    score, image_grad = detector.max_objectness_grad(frame)
    image_grad = image_grad.copy()
    g_patch = np.zeros_like(patch.data)
    # Later placements overwrite earlier ones, so route gradients in reverse
    # and blank each rect once consumed.
    for record in reversed(records):
        g_patch += backprop_through_placement(image_grad, record)
        image_grad[record.y0 : record.y1, record.x0 : record.x1, :] = 0.0
    return score, g_patch


def train_patch(samples, detector, cfg, palette=None):
    """Train a patch against a grad-capable detector.

    Returns the final patch and the per-iteration loss history.
    """
    if "grad" not in detector.capabilities:
        raise DetectorCapabilityError(
            "patch training needs a grad-capable detector; "
            "bridge detectors are eval-only"
        )
    samples = list(samples)
    if not samples:
        raise ValueError("at least one training sample is required")
    if palette is None:
        palette = PrintableColorSet.default()

    patch = init_patch(cfg.patch_w, cfg.patch_h, cfg.seed)
    state = AdamState.zeros(patch.data.shape)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    history = []

    for _ in range(cfg.iterations):
        idx = batch_rng.integers(0, len(samples), size=cfg.minibatch)
        current = patch
        results = parallel_map(
            lambda i: _objectness_forward_backward(samples[i], current, detector, cfg),
            idx,
            cfg.jobs,
        )
        l_obj = sum(score for score, _ in results) / cfg.minibatch
        g_obj = sum((g for _, g in results), start=np.zeros_like(patch.data))
        g_obj /= cfg.minibatch

        l_nps, g_nps = nps_score(patch, palette)
        l_tv, l_tv_eff, g_tv = tv_score(patch)
        grad = combine_gradients(g_nps, g_tv, g_obj, cfg.weights)
        history.append(
            LossBreakdown.from_terms(l_nps, l_tv, l_tv_eff, l_obj, cfg.weights)
        )
        state, patch = adam_step(state, grad, patch, cfg.lr)

    return patch, history
