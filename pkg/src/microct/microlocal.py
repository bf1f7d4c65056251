"""Visibility of edges, streak prediction and wavelet-domain kernel estimates.

An edge is summarised by a position and an unsigned normal direction.  It
is recoverable from the data when its normal is a measured direction; edges
whose normal hits a boundary direction of the angle set spawn streaks along
the line through them with that normal.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgumentError
from .geometry import ANGLE_TOL, AngleSet, ScanGeometry, angle_set_contains, angular_distance, wrap_angle
from .masks import FilterMask
from .wavelet import haar_analyze_array, haar_synthesize_array, num_subbands, subband_layout
from .xray import XRayTransform


class Visibility(enum.Enum):
    VISIBLE = "visible"
    INVISIBLE = "invisible"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class EdgePoint:
    position: tuple[float, float]
    normal: float

    def __post_init__(self):
        object.__setattr__(self, "normal", wrap_angle(self.normal))
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class StreakLine:
    omega: float
    offset: float
    source: EdgePoint

    def direction(self) -> tuple[float, float]:
        return -math.sin(self.omega), math.cos(self.omega)


def classify_visibility(e: EdgePoint, a: AngleSet, tol: float = ANGLE_TOL) -> Visibility:
    n = wrap_angle(e.normal)
    for b in a.boundary():
        if angular_distance(n, b) <= tol:
            return Visibility.BOUNDARY
    return Visibility.VISIBLE if angle_set_contains(a, n) else Visibility.INVISIBLE


def predict_streaks(edges, a: AngleSet, tol: float = math.radians(1.0)) -> list[StreakLine]:
    """Streak lines ``L(omega0, x0 . omega0)`` for edges whose normal is near a boundary angle.

    ``tol`` should be about one angular sampling step of the scan; callers
    with a geometry at hand pass ``geometry.angular_step``.
    """
    out = []
    bounds = a.boundary()
    for e in edges:
        for w0 in bounds:
            if angular_distance(e.normal, w0) <= tol + ANGLE_TOL:
                off = e.position[0] * math.cos(w0) + e.position[1] * math.sin(w0)
                out.append(StreakLine(float(w0), off, e))
    return out


def peak_gradient(u: np.ndarray, smooth: float = 1.5) -> float:
    """Largest gradient magnitude seen by :func:`extract_edges` with the same ``smooth``."""
    u = np.asarray(u, dtype=np.float64)
    if smooth > 0:
        u = gaussian_filter(u, smooth, mode="nearest")
    return float(np.hypot(*np.gradient(u)).max())


def extract_edges(u: np.ndarray, threshold: float, pixel_pitch: float | None = None,
                  smooth: float = 1.5) -> list[EdgePoint]:
    """Pixels whose central-difference gradient magnitude exceeds ``threshold``.

    The image is first blurred with a Gaussian of width ``smooth`` pixels
    (0 disables it); without it the orientation of thin anti-aliased rims
    snaps towards the pixel axes.  The gradient is taken per pixel (unit
    spacing); positions are returned in physical coordinates with the image
    centred on the origin.
    """
    if threshold <= 0:
        raise InvalidArgumentError("threshold must be positive")
    u = np.asarray(u, dtype=np.float64)
    n_r, n_c = u.shape
    pitch = 2.0 / n_c if pixel_pitch is None else pixel_pitch
    if smooth > 0:
        u = gaussian_filter(u, smooth, mode="nearest")
    d_row, d_col = np.gradient(u)
    gx, gy = d_col, -d_row
    mag = np.hypot(gx, gy)
    rows, cols = np.nonzero(mag > threshold)
    normals = wrap_angle(np.arctan2(gy[rows, cols], gx[rows, cols]))
    x1 = (cols - (n_c - 1) / 2) * pitch
    x2 = ((n_r - 1) / 2 - rows) * pitch
    return [EdgePoint((a, b), float(n)) for a, b, n in zip(x1, x2, np.atleast_1d(normals))]


def ellipse_edges(specs, count: int = 256) -> list[EdgePoint]:
    """Exact rim points with analytic normals for a list of ellipses."""
    out = []
    for s in specs:
        pts, normals = s.boundary(count)
        out.extend(EdgePoint(tuple(p), float(n)) for p, n in zip(pts, normals))
    return out


# -- kernel atlas -------------------------------------------------------------


@dataclass
class KernelAtlas:
    filters: np.ndarray       # (Q, Q, p, p): [target, source]
    levels: int
    side: int

    @property
    def size(self) -> int:
        return self.filters.shape[-1]

    def diagonal(self) -> list[np.ndarray]:
        return [self.filters[i, i] for i in range(self.filters.shape[0])]

    def energy_inside(self, mask: FilterMask) -> np.ndarray:
        """Fraction of each diagonal patch's energy that lies in ``mask``."""
        if mask.size != self.size:
            raise InvalidArgumentError("mask and atlas patch sizes differ")
        fr = []
        for patch in self.diagonal():
            e = patch * patch
            tot = e.sum()
            fr.append(float(e[mask.support].sum() / tot) if tot > 0 else 1.0)
        return np.array(fr)


def _crop(band: np.ndarray, r0: int, c0: int, p: int) -> np.ndarray:
    h = (p - 1) // 2
    s = band.shape[-1]
    ri = np.mod(np.arange(r0 - h, r0 + h + 1), s)
    ci = np.mod(np.arange(c0 - h, c0 + h + 1), s)
    return band[np.ix_(ri, ci)]


def estimate_kernel_atlas(g: ScanGeometry, levels: int, p: int, op: XRayTransform | None = None,
                          amplitude: float = 1.0) -> KernelAtlas:
    """Impulse responses of ``W R^T R W^T`` between every pair of subbands.

    For each source subband a unit impulse (times ``amplitude``) sits at the
    centre of its rectangle.  The response in each target subband is
    cropped around the impulse location mapped to the target's resolution
    and divided by the mass the impulse has after that resampling.
    """
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd, got {p}")
    layout = subband_layout(g.image_size, levels)
    coarsest = layout[0].side
    if p > coarsest:
        raise InvalidArgumentError(f"patch size {p} exceeds the coarsest subband side {coarsest}")
    op = op or XRayTransform(g).normalized()
    q = num_subbands(levels)
    out = np.zeros((q, q, p, p))
    n = g.image_size
    for src in layout:
        s = src.side
        w = np.zeros((n, n))
        w[src.rows.start + s // 2, src.cols.start + s // 2] = amplitude
        if amplitude == 0:
            continue
        resp = haar_analyze_array(op.normal(haar_synthesize_array(w, levels)), levels)
        for tgt in layout:
            t = tgt.side
            if t >= s:
                f = t // s
                centre, mass = (s // 2) * f + f // 2, float(f * f)
            else:
                f = s // t
                centre, mass = (s // 2) // f, 1.0 / (f * f)
            band = resp[tgt.rows, tgt.cols]
            out[tgt.iota, src.iota] = _crop(band, centre, centre, p) / (mass * amplitude)
    return KernelAtlas(out, levels, n)
