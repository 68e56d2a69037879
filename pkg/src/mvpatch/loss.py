"""Patch training loss terms and their analytic pixel gradients.

Three terms: printability (mean distance of each pixel to the nearest
color of a printable palette), smoothness (mean neighbor-difference
magnitude, floored at 0.1 so the optimizer stops caring once the patch is
smooth enough), and detector objectness (computed elsewhere).  The total
is the weighted sum alpha * printability + beta * smoothness + gamma *
objectness; gradients combine with the same weights.
"""

from dataclasses import dataclass
from importlib import resources

import numpy as np

TV_FLOOR = 0.1
# Inside the square root, keeps the smoothness term differentiable where
# neighboring pixels are equal.
TV_EPS = 1e-12


class LossError(Exception):
    pass


class PatchTooSmall(LossError):
    """Smoothness needs at least a 2x2 patch."""


@dataclass(frozen=True)
class LossWeights:
    """Scaling factors for the three loss terms; all must be >= 0."""

    alpha: float = 0.01
    beta: float = 2.5
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0.0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class PrintableColorSet:
    """Non-empty set of printer-reproducible RGB colors, channels in [0, 1]."""

    colors: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.colors, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] == 0:
            raise ValueError("colors must be a non-empty (k, 3) array")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("color channels must lie in [0, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "colors", arr)

    @classmethod
    def from_file(cls, path):
        """Parse a palette file: one color per line, three floats in [0, 1],
        whitespace separated; lines starting with '#' are ignored."""
        colors = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                fields = stripped.split()
                if len(fields) != 3:
                    raise ValueError(
                        f"{path}:{lineno}: expected 3 values, got {len(fields)}"
                    )
                try:
                    rgb = [float(f) for f in fields]
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                if min(rgb) < 0.0 or max(rgb) > 1.0:
                    raise ValueError(f"{path}:{lineno}: channel outside [0, 1]")
                colors.append(rgb)
        if not colors:
            raise ValueError(f"{path}: palette file contains no colors")
        return cls(np.array(colors))

    @classmethod
    def default(cls):
        """The 30-color palette shipped with the package."""
        ref = resources.files("mvpatch").joinpath("palettes/default30.txt")
        with resources.as_file(ref) as path:
            return cls.from_file(path)

    def __len__(self):
        return self.colors.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    """The three loss terms at one training step plus their weighted total."""

    l_nps: float
    l_tv: float
    l_tv_effective: float
    l_obj: float
    total: float

    @classmethod
    def from_terms(cls, l_nps, l_tv, l_tv_effective, l_obj, weights):
        return cls(
            l_nps=l_nps,
            l_tv=l_tv,
            l_tv_effective=l_tv_effective,
            l_obj=l_obj,
            total=total_loss(l_nps, l_tv_effective, l_obj, weights),
        )


def nps_score(patch, color_set):
    """Mean Euclidean RGB distance of patch pixels to the nearest printable color.

    Returns the score and its analytic gradient with respect to the patch.
    A pixel exactly on a printable color contributes zero gradient; nearest-
    color ties go to the first color in the set.
    """
    p = patch.data
    colors = color_set.colors
    diff = p[:, :, None, :] - colors[None, None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    idx = np.argmin(dist, axis=-1)
    dmin = np.take_along_axis(dist, idx[..., None], axis=-1)[..., 0]
    n = p.shape[0] * p.shape[1]
    score = float(dmin.sum() / n)

    nearest = colors[idx]
    safe = np.where(dmin > 0.0, dmin, 1.0)[..., None]
    grad = np.where((dmin > 0.0)[..., None], (p - nearest) / safe, 0.0) / n
    return score, grad


def tv_score(patch):
    """Smoothness of the patch: mean per-pixel neighbor-difference magnitude.

    Each pixel contributes sqrt(|right - here|^2 + |below - here|^2 + eps),
    summed over RGB and averaged over all pixels; missing neighbors at the
    last row/column contribute nothing.  The effective value is floored at
    0.1, and the returned gradient is the derivative of the *effective*
    term: identically zero while the raw value is below the floor.

    Returns (raw, effective, gradient).
    """
    p = patch.data
    h, w = p.shape[:2]
    if h < 2 or w < 2:
        raise PatchTooSmall(f"patch must be at least 2x2, got {w}x{h}")
    n = h * w

    dx = p[:, 1:, :] - p[:, :-1, :]
    dy = p[1:, :, :] - p[:-1, :, :]
    sq = np.full((h, w), TV_EPS)
    sq[:, :-1] += np.sum(dx * dx, axis=-1)
    sq[:-1, :] += np.sum(dy * dy, axis=-1)
    cell = np.sqrt(sq)
    raw = float(cell.sum() / n)

    effective = max(raw, TV_FLOOR)
    if raw < TV_FLOOR:
        return raw, effective, np.zeros_like(p)

    grad = np.zeros_like(p)
    gx = dx / cell[:, :-1, None]
    grad[:, 1:, :] += gx
    grad[:, :-1, :] -= gx
    gy = dy / cell[:-1, :, None]
    grad[1:, :, :] += gy
    grad[:-1, :, :] -= gy
    grad /= n
    return raw, effective, grad


def total_loss(l_nps, l_tv_effective, l_obj, weights):
    """Weighted sum of the three terms."""
    return (
        weights.alpha * l_nps
        + weights.beta * l_tv_effective
        + weights.gamma * l_obj
    )


def combine_gradients(g_nps, g_tv, g_obj, weights):
    """The same weighted sum applied to the term gradients."""
    return weights.alpha * g_nps + weights.beta * g_tv + weights.gamma * g_obj
