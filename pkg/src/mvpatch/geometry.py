"""Planar perspective transforms between camera views.

A view-to-view mapping is modelled as a 3x3 projective matrix whose
bottom-right entry is pinned to 1, leaving eight free parameters.  The
matrix is estimated from point correspondences with the direct linear
transform: each correspondence contributes two rows to an inhomogeneous
2n x 8 linear system, solved by least squares after Hartley-style point
normalization for numerical conditioning.
"""

import math
from dataclasses import dataclass

import numpy as np

# Ratio of smallest to largest singular value of the design matrix below
# which the correspondence set is declared degenerate.
DEGENERACY_SV_RATIO = 1e-10
MIN_DET = 1e-12
MIN_DENOMINATOR = 1e-12


class GeometryError(Exception):
    """Base class for geometry failures."""


class TooFewPoints(GeometryError):
    """Fewer than four correspondences were supplied."""


class DegenerateConfiguration(GeometryError):
    """The correspondences do not determine a unique transform."""


class AtInfinity(GeometryError):
    """The point maps to the line at infinity (vanishing denominator)."""


class Singular(GeometryError):
    """The matrix is not invertible."""


@dataclass(frozen=True)
class Point2:
    """A pixel coordinate.  Both components must be finite."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class Correspondence:
    """A matched pair of pixel locations in the reference and destination view."""

    ref: Point2
    dst: Point2


class Homography:
    """3x3 projective transform, normalized so m[2][2] == 1.

    Construct directly from an already-normalized matrix, or through
    :meth:`from_matrix` which rescales an arbitrary nonzero matrix.
    The wrapped array is read-only.
    """

    __slots__ = ("_m",)

    def __init__(self, matrix):
        m = np.array(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix contains non-finite entries")
        if m[2, 2] != 1.0:
            raise ValueError("matrix must be normalized so m[2][2] == 1")
        if abs(float(np.linalg.det(m))) <= MIN_DET:
            raise Singular("matrix determinant is below the invertibility threshold")
        m.setflags(write=False)
        self._m = m

    @classmethod
    def from_matrix(cls, matrix):
        """Rescale an arbitrary 3x3 matrix so its bottom-right entry is 1."""
        m = np.array(matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
        scale = m[2, 2]
        if not np.isfinite(scale) or abs(scale) <= MIN_DET:
            raise Singular("cannot normalize: bottom-right entry is (near) zero")
        m = m / scale
        m[2, 2] = 1.0
        return cls(m)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx, dy):
        m = np.eye(3)
        m[0, 2] = dx
        m[1, 2] = dy
        return cls(m)

    @property
    def matrix(self):
        """The read-only 3x3 matrix."""
        return self._m

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:.6g}" for v in row) for row in self._m)
        return f"Homography([{rows}])"


def _normalize_points(pts):
    """Hartley normalization: centroid to origin, mean distance sqrt(2).

    Returns the 3x3 normalizing transform and the normalized (n, 2) points.
    """
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    mean_dist = float(np.mean(np.hypot(centered[:, 0], centered[:, 1])))
    if mean_dist <= MIN_DENOMINATOR:
        raise DegenerateConfiguration("points are (nearly) all identical")
    s = math.sqrt(2.0) / mean_dist
    t = np.array(
        [
            [s, 0.0, -s * centroid[0]],
            [0.0, s, -s * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return t, centered * s


def estimate_homography(correspondences):
    """Estimate the perspective transform from >= 4 point correspondences.

    Builds the 2n x 8 direct-linear-transform system (bottom-right entry
    fixed to 1) on Hartley-normalized coordinates and solves it by least
    squares.  Four exact correspondences in general position are solved
    exactly; more are fit in the algebraic least-squares sense.

    Raises:
        TooFewPoints: fewer than 4 correspondences.
        DegenerateConfiguration: the system is rank deficient (e.g.
            collinear points), detected via the singular-value ratio.
    """
    n = len(correspondences)
    if n < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")
    ref = np.array([[c.ref.x, c.ref.y] for c in correspondences], dtype=float)
    dst = np.array([[c.dst.x, c.dst.y] for c in correspondences], dtype=float)

    t_ref, rn = _normalize_points(ref)
    t_dst, dn = _normalize_points(dst)

    x, y = rn[:, 0], rn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)
    a = np.empty((2 * n, 8))
    a[0::2] = np.stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y], axis=1)
    a[1::2] = np.stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y], axis=1)
    b = np.empty(2 * n)
    b[0::2] = u
    b[1::2] = v

    h, _, _, sv = np.linalg.lstsq(a, b, rcond=None)
    if sv[0] <= 0.0 or sv[-1] / sv[0] < DEGENERACY_SV_RATIO:
        raise DegenerateConfiguration(
            "rank-deficient correspondence set "
            f"(singular-value ratio {sv[-1] / max(sv[0], 1e-300):.3e})"
        )

    hn = np.array(
        [
            [h[0], h[1], h[2]],
            [h[3], h[4], h[5]],
            [h[6], h[7], 1.0],
        ]
    )
    m = np.linalg.inv(t_dst) @ hn @ t_ref
    return Homography.from_matrix(m)


def apply_homography(h, p):
    """Map a point through the transform.

    Raises AtInfinity when the projective denominator vanishes.
    """
    m = h.matrix
    w = m[2, 0] * p.x + m[2, 1] * p.y + 1.0
    if abs(w) <= MIN_DENOMINATOR:
        raise AtInfinity(f"point ({p.x}, {p.y}) maps to infinity")
    return Point2(
        (m[0, 0] * p.x + m[0, 1] * p.y + m[0, 2]) / w,
        (m[1, 0] * p.x + m[1, 1] * p.y + m[1, 2]) / w,
    )


def map_points(h, points):
    """Vectorized apply_homography over an (n, 2) array of points."""
    pts = np.asarray(points, dtype=float)
    m = h.matrix
    xs, ys = pts[:, 0], pts[:, 1]
    w = m[2, 0] * xs + m[2, 1] * ys + 1.0
    if np.any(np.abs(w) <= MIN_DENOMINATOR):
        raise AtInfinity("some points map to infinity")
    u = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / w
    v = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / w
    return np.stack([u, v], axis=1)


def invert(h):
    """Inverse transform, renormalized so m[2][2] == 1."""
    m = h.matrix
    if abs(float(np.linalg.det(m))) <= MIN_DET:
        raise Singular("matrix is not invertible")
    return Homography.from_matrix(np.linalg.inv(m))


def compose(h1, h2):
    """Transform equal to applying h2 first, then h1."""
    product = h1.matrix @ h2.matrix
    return Homography.from_matrix(product)


def reprojection_errors(h, correspondences):
    """Per-correspondence distance |H(ref) - dst| in pixels."""
    ref = np.array([[c.ref.x, c.ref.y] for c in correspondences], dtype=float)
    dst = np.array([[c.dst.x, c.dst.y] for c in correspondences], dtype=float)
    mapped = map_points(h, ref)
    return np.hypot(mapped[:, 0] - dst[:, 0], mapped[:, 1] - dst[:, 1])
