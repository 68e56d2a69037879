"""Image rasters, bilinear sampling, perspective warping, and patch compositing.

Images are float64 RGB arrays of shape (height, width, 3) with channel
values in [0, 1].  Pixel (column j, row i) sits at point (x=j, y=i), so
the sampling domain of a w x h image is [0, w-1] x [0, h-1].  Warping and
projection use inverse mapping: every destination pixel is sampled from
the source through the inverted transform, with bilinear interpolation.
"""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import AtInfinity, Point2, apply_homography, invert


class ImagingError(Exception):
    """Base class for raster-operation failures."""


class EmptyIntersection(ImagingError):
    """The patch falls entirely outside the frame."""


class DegenerateQuad(ImagingError):
    """The projected quad self-intersects or collapses below 1 px^2."""


class ImageBuffer:
    """Immutable RGB raster; float64 channels in [0, 1], no NaN."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self):
        """Read-only (height, width, 3) float array."""
        return self._data

    @property
    def width(self):
        return self._data.shape[1]

    @property
    def height(self):
        return self._data.shape[0]

    @classmethod
    def filled(cls, width, height, color=(0.0, 0.0, 0.0)):
        arr = np.empty((height, width, 3))
        arr[:] = np.asarray(color, dtype=float)
        return cls(arr)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height})"


@dataclass(frozen=True)
class AlphaMask:
    """Per-pixel coverage in [0, 1]; dimensions match the paired image."""

    coverage: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.coverage, dtype=float)
        if cov.ndim != 2:
            raise ValueError("coverage must be a 2-D array")
        if cov.min() < 0.0 or cov.max() > 1.0:
            raise ValueError("coverage values must lie in [0, 1]")
        cov = cov.copy()
        cov.setflags(write=False)
        object.__setattr__(self, "coverage", cov)

    @property
    def width(self):
        return self.coverage.shape[1]

    @property
    def height(self):
        return self.coverage.shape[0]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates; xmin < xmax and ymin < ymax."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(
                f"invalid box ({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax})"
            )

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin


@dataclass(frozen=True)
class PatchPlacement:
    """Where a patch goes inside a person box.

    ``scale`` is the fraction of the box width the patch width occupies;
    ``anchor`` is the relative center position inside the box.
    """

    bbox: BBox
    scale: float = 0.5
    anchor: tuple = (0.5, 0.5)

    def __post_init__(self):
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"scale must be in (0, 1], got {self.scale}")
        ax, ay = self.anchor
        if not (0.0 <= ax <= 1.0 and 0.0 <= ay <= 1.0):
            raise ValueError(f"anchor must lie in [0, 1]^2, got {self.anchor}")


@dataclass(frozen=True)
class PlacementRecord:
    """Forward-pass geometry of place_patch, kept for the gradient adjoint.

    ``us``/``vs`` are the per-column / per-row source coordinates of the
    bilinear resize; the placed region is frame[y0:y1, x0:x1].
    """

    x0: int
    y0: int
    x1: int
    y1: int
    us: np.ndarray
    vs: np.ndarray
    patch_height: int
    patch_width: int


# ---------------------------------------------------------------------------
# sampling


def _sample_grid(data, xs, ys):
    """Bilinear interpolation at float coordinates (caller ensures bounds)."""
    h, w = data.shape[:2]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = (1.0 - fx) * data[y0, x0] + fx * data[y0, x1]
    bottom = (1.0 - fx) * data[y1, x0] + fx * data[y1, x1]
    return (1.0 - fy) * top + fy * bottom


def bilinear_sample(img, x, y):
    """Sample the image at (x, y); returns a length-3 array, or None outside.

    Outside means beyond [0, width-1] x [0, height-1]; it is a value, not
    an error.
    """
    if not (0.0 <= x <= img.width - 1 and 0.0 <= y <= img.height - 1):
        return None
    return _sample_grid(img.data, np.array([x]), np.array([y]))[0]


# ---------------------------------------------------------------------------
# warping


def warp_image(src, h, out_w, out_h):
    """Warp an image through a perspective transform by inverse mapping.

    Every output pixel (x, y) is sampled from the source at the image of
    (x, y) under the inverse transform.  Returns the warped image and an
    alpha mask that is 1 where the source sample was in bounds, 0 elsewhere
    (those pixels are black).
    """
    hin = invert(h)
    m = hin.matrix
    sh, sw = src.data.shape[:2]
    xs, ys = np.meshgrid(
        np.arange(out_w, dtype=float), np.arange(out_h, dtype=float)
    )
    w = m[2, 0] * xs + m[2, 1] * ys + 1.0
    finite = np.abs(w) > 1e-12
    wsafe = np.where(finite, w, 1.0)
    u = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / wsafe
    v = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / wsafe
    inside = finite & (u >= 0.0) & (u <= sw - 1) & (v >= 0.0) & (v <= sh - 1)
    sampled = _sample_grid(src.data, np.where(inside, u, 0.0), np.where(inside, v, 0.0))
    out = np.where(inside[..., None], sampled, 0.0)
    return ImageBuffer(out), AlphaMask(inside.astype(float))


# ---------------------------------------------------------------------------
# patch compositing


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def _resize_source_coords(n_out, n_src):
    """Source coordinates of a bilinear resize (endpoints map to endpoints)."""
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out, dtype=float) * (n_src - 1) / (n_out - 1)


def place_patch_recorded(frame, patch, placement):
    """place_patch that also returns the geometry record for backprop."""
    bbox = placement.bbox
    tw = max(1, _round_half_up(placement.scale * bbox.width))
    th = max(1, _round_half_up(tw * patch.height / patch.width))

    cx = bbox.xmin + placement.anchor[0] * bbox.width
    cy = bbox.ymin + placement.anchor[1] * bbox.height
    left = _round_half_up(cx - tw / 2.0)
    top = _round_half_up(cy - th / 2.0)

    x0 = max(left, 0)
    y0 = max(top, 0)
    x1 = min(left + tw, frame.width)
    y1 = min(top + th, frame.height)
    if x0 >= x1 or y0 >= y1:
        raise EmptyIntersection(
            f"patch rect ({left}, {top})+({tw}x{th}) lies outside the "
            f"{frame.width}x{frame.height} frame"
        )

    us = _resize_source_coords(tw, patch.width)[x0 - left : x1 - left]
    vs = _resize_source_coords(th, patch.height)[y0 - top : y1 - top]
    grid_u, grid_v = np.meshgrid(us, vs)
    resized = _sample_grid(patch.data, grid_u, grid_v)

    out = frame.data.copy()
    out[y0:y1, x0:x1] = resized
    quad = (
        Point2(float(x0), float(y0)),
        Point2(float(x1), float(y0)),
        Point2(float(x1), float(y1)),
        Point2(float(x0), float(y1)),
    )
    record = PlacementRecord(
        x0=x0,
        y0=y0,
        x1=x1,
        y1=y1,
        us=us,
        vs=vs,
        patch_height=patch.height,
        patch_width=patch.width,
    )
    return ImageBuffer(out), quad, record


def place_patch(frame, patch, placement):
    """Composite a patch into a person box, overwriting frame pixels.

    The patch is bilinearly rescaled so its width is scale * box width
    (aspect preserved) and centered at the anchor point.  Portions outside
    the frame are clipped silently.  Returns the new frame and the
    axis-aligned corner quad actually covered.
    """
    img, quad, _ = place_patch_recorded(frame, patch, placement)
    return img, quad


def _quad_edge_values(quad_xy, px, py):
    """Edge functions of a convex quad at points (px, py).

    Returns a list of (values, dx, dy) per edge, with the quad oriented so
    interior points have nonnegative values on every edge.
    """
    q = np.asarray(quad_xy, dtype=float)
    # Shoelace signed area; reverse the winding if needed so that interior
    # edge values come out nonnegative in y-down raster coordinates.
    area2 = 0.0
    for i in range(4):
        ax, ay = q[i]
        bx, by = q[(i + 1) % 4]
        area2 += ax * by - bx * ay
    if area2 < 0.0:
        q = q[::-1]
    edges = []
    for i in range(4):
        ax, ay = q[i]
        bx, by = q[(i + 1) % 4]
        dx, dy = bx - ax, by - ay
        values = dx * (py - ay) - dy * (px - ax)
        edges.append((values, dx, dy))
    return edges


def _check_quad(quad_xy):
    q = np.asarray(quad_xy, dtype=float)
    area2 = 0.0
    for i in range(4):
        ax, ay = q[i]
        bx, by = q[(i + 1) % 4]
        area2 += ax * by - bx * ay
    if abs(area2) / 2.0 < 1.0:
        raise DegenerateQuad(f"projected quad area {abs(area2) / 2.0:.3g} px^2 < 1")
    signs = []
    for i in range(4):
        a = q[i]
        b = q[(i + 1) % 4]
        c = q[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross != 0.0:
            signs.append(1.0 if cross > 0.0 else -1.0)
    if len(set(signs)) > 1:
        raise DegenerateQuad("projected quad self-intersects")


def _inside_quad(quad_xy, px, py):
    """Half-open membership test for pixel centers in a convex quad.

    Boundary pixels are included on top/left edges and excluded on
    bottom/right edges (the raster fill rule), so that axis-aligned quads
    cover exactly the pixel rows/columns [y0, y1) x [x0, x1).
    """
    inside = np.ones(px.shape, dtype=bool)
    for values, dx, dy in _quad_edge_values(quad_xy, px, py):
        on_boundary_ok = dy < 0.0 or (dy == 0.0 and dx > 0.0)
        if on_boundary_ok:
            inside &= values >= 0.0
        else:
            inside &= values > 0.0
    return inside


def project_patch(dst_frame, ref_frame_with_patch, patch_quad, h_ref_to_dst):
    """Carry a patched region from the reference view into a destination view.

    The quad is mapped through the transform; destination pixels inside the
    projected quad are replaced by inverse-mapped bilinear samples of the
    patched reference frame.  Every other pixel is untouched.
    """
    hin = invert(h_ref_to_dst)
    try:
        corners = [apply_homography(h_ref_to_dst, p) for p in patch_quad]
    except AtInfinity as exc:
        raise DegenerateQuad(f"quad corner maps to infinity: {exc}") from exc
    quad_xy = [(p.x, p.y) for p in corners]
    _check_quad(quad_xy)

    xs_min = max(0, int(np.floor(min(p[0] for p in quad_xy))))
    xs_max = min(dst_frame.width - 1, int(np.ceil(max(p[0] for p in quad_xy))))
    ys_min = max(0, int(np.floor(min(p[1] for p in quad_xy))))
    ys_max = min(dst_frame.height - 1, int(np.ceil(max(p[1] for p in quad_xy))))
    if xs_min > xs_max or ys_min > ys_max:
        return ImageBuffer(dst_frame.data)

    px, py = np.meshgrid(
        np.arange(xs_min, xs_max + 1, dtype=float),
        np.arange(ys_min, ys_max + 1, dtype=float),
    )
    member = _inside_quad(quad_xy, px, py)

    m = hin.matrix
    w = m[2, 0] * px + m[2, 1] * py + 1.0
    finite = np.abs(w) > 1e-12
    wsafe = np.where(finite, w, 1.0)
    u = (m[0, 0] * px + m[0, 1] * py + m[0, 2]) / wsafe
    v = (m[1, 0] * px + m[1, 1] * py + m[1, 2]) / wsafe
    sh, sw = ref_frame_with_patch.data.shape[:2]
    ok = (
        member
        & finite
        & (u >= 0.0)
        & (u <= sw - 1)
        & (v >= 0.0)
        & (v <= sh - 1)
    )
    sampled = _sample_grid(
        ref_frame_with_patch.data, np.where(ok, u, 0.0), np.where(ok, v, 0.0)
    )
    out = dst_frame.data.copy()
    region = out[ys_min : ys_max + 1, xs_min : xs_max + 1]
    out[ys_min : ys_max + 1, xs_min : xs_max + 1] = np.where(
        ok[..., None], sampled, region
    )
    return ImageBuffer(out)


# ---------------------------------------------------------------------------
# PNG I/O (8-bit RGB; alpha ignored on read)


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return ImageBuffer(arr)


def write_png(img, path):
    quantized = np.floor(img.data * 255.0 + 0.5)
    arr = np.clip(quantized, 0.0, 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
