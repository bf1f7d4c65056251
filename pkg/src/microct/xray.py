"""Discrete X-ray transform, its exact adjoint, FBP and norm estimation.

The forward projector is Joseph's method: each ray is marched one pixel
row (or column) at a time along its dominant axis, sampling the image by
linear interpolation along the other axis.  The interpolation weights are
assembled once per geometry into a sparse matrix, so the backprojector is
its exact transpose.
"""

from __future__ import annotations

import functools
import json
import math
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CorruptDatasetError, GeometryMismatchError, InvalidArgumentError
from .geometry import ScanGeometry


def _joseph_angle(g: ScanGeometry, theta: float):
    n = g.image_size
    p = g.pixel_pitch
    nd = g.num_detectors
    s = (np.arange(nd) - (nd - 1) / 2) * g.detector_pitch
    c, sn = math.cos(theta), math.sin(theta)
    centre = (n - 1) / 2
    idx = np.arange(n)
    if abs(c) >= abs(sn):
        # mostly vertical ray: one sample per pixel row
        x2 = (centre - idx) * p
        t = (x2[None, :] - s[:, None] * sn) / c
        x1 = s[:, None] * c - t * sn
        frac_idx = x1 / p + centre
        step = p / abs(c)
        lo = np.floor(frac_idx).astype(np.int64)
        f = frac_idx - lo
        rows = np.broadcast_to(idx[None, :], lo.shape)
        cols_lo, cols_hi = lo, lo + 1
        pix_lo = rows * n + cols_lo
        pix_hi = rows * n + cols_hi
        ok_lo = (cols_lo >= 0) & (cols_lo < n)
        ok_hi = (cols_hi >= 0) & (cols_hi < n)
    else:
        # mostly horizontal ray: one sample per pixel column
        x1 = (idx - centre) * p
        t = (s[:, None] * c - x1[None, :]) / sn
        x2 = s[:, None] * sn + t * c
        frac_idx = centre - x2 / p
        step = p / abs(sn)
        lo = np.floor(frac_idx).astype(np.int64)
        f = frac_idx - lo
        cols = np.broadcast_to(idx[None, :], lo.shape)
        rows_lo, rows_hi = lo, lo + 1
        pix_lo = rows_lo * n + cols
        pix_hi = rows_hi * n + cols
        ok_lo = (rows_lo >= 0) & (rows_lo < n)
        ok_hi = (rows_hi >= 0) & (rows_hi < n)
    det = np.broadcast_to(np.arange(nd)[:, None], lo.shape)
    w_lo = (1.0 - f) * step
    w_hi = f * step
    keep_lo = ok_lo & (w_lo != 0)
    keep_hi = ok_hi & (w_hi != 0)
    return (
        np.concatenate([det[keep_lo], det[keep_hi]]),
        np.concatenate([pix_lo[keep_lo], pix_hi[keep_hi]]),
        np.concatenate([w_lo[keep_lo], w_hi[keep_hi]]),
    )


@functools.lru_cache(maxsize=16)
def system_matrix(g: ScanGeometry) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse projection matrix for ``g`` and its transpose (both CSR)."""
    nd = g.num_detectors
    rows, cols, vals = [], [], []
    for a, theta in enumerate(g.angles):
        d, pix, w = _joseph_angle(g, theta)
        rows.append(d + a * nd)
        cols.append(pix)
        vals.append(w)
    n_rays = len(g.angles) * nd
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, g.image_size ** 2),
    )
    A.sort_indices()
    At = A.T.tocsr()
    At.sort_indices()
    return A, At


def _apply(M: sp.csr_matrix, x: np.ndarray, in_shape, out_shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != in_shape:
        raise GeometryMismatchError(f"expected trailing shape {in_shape}, got {x.shape}")
    lead = x.shape[:-2]
    flat = np.ascontiguousarray(x.reshape(-1, in_shape[0] * in_shape[1]).T)
    # always the multi-vector kernel, so results do not depend on batch size
    out = M @ flat
    return np.ascontiguousarray(out.T).reshape(*lead, *out_shape)


def ramp_filter(num_detectors: int, detector_pitch: float, window: str | None = None) -> np.ndarray:
    """Frequency response of the discrete ramp on a zero-padded detector row.

    The kernel is the band-limited ramp sampled in the spatial domain, so
    its DFT approximates ``|xi|`` without losing the zero-frequency term to
    zero padding.  Returns an array of length ``P``, the padded row length.
    """
    size = max(64, 1 << int(math.ceil(math.log2(2 * num_detectors))))
    k = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 1.0 / (4 * detector_pitch ** 2)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (math.pi * k[odd] * detector_pitch) ** 2
    H = np.real(np.fft.fft(h)) * detector_pitch
    if window == "hann":
        freq = np.fft.fftfreq(size)
        H = H * (0.5 + 0.5 * np.cos(2 * math.pi * freq))
    elif window is not None:
        raise InvalidArgumentError(f"unknown window {window!r}")
    return H


class XRayTransform:
    """Matrix-free handle on ``scale * R_A`` for one geometry.

    ``scale`` is the normalisation factor folded into stored sinograms; a
    normalised operator has unit spectral norm.
    """

    def __init__(self, geometry: ScanGeometry, scale: float = 1.0):
        self.geometry = geometry
        self.scale = float(scale)
        self._A, self._At = system_matrix(geometry)

    def forward(self, u: np.ndarray) -> np.ndarray:
        m = _apply(self._A, u, self.geometry.shape, self.geometry.sinogram_shape)
        return m * self.scale if self.scale != 1.0 else m

    def adjoint(self, m: np.ndarray) -> np.ndarray:
        u = _apply(self._At, m, self.geometry.sinogram_shape, self.geometry.shape)
        return u * self.scale if self.scale != 1.0 else u

    def normal(self, u: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(u))

    def fbp(self, m: np.ndarray, window: str | None = None) -> np.ndarray:
        """Filtered backprojection, undoing the stored normalisation."""
        g = self.geometry
        m = np.asarray(m, dtype=np.float64)
        if m.shape[-2:] != g.sinogram_shape:
            raise GeometryMismatchError(f"sinogram shape {m.shape} does not match {g.sinogram_shape}")
        H = ramp_filter(g.num_detectors, g.detector_pitch, window)
        padded = np.zeros(m.shape[:-1] + (H.size,))
        padded[..., : g.num_detectors] = m / self.scale
        filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=-1) * H, axis=-1))
        filtered = filtered[..., : g.num_detectors]
        bp = _apply(self._At, filtered, g.sinogram_shape, g.shape)
        return bp * (g.detector_pitch / g.pixel_pitch ** 2) * g.angular_step

    def estimate_norm(self, iterations: int = 100, seed: int = 0, rtol: float = 1e-4) -> float:
        return estimate_operator_norm(self, iterations=iterations, seed=seed, rtol=rtol)

    def normalized(self, iterations: int = 100, seed: int = 0) -> XRayTransform:
        raw = XRayTransform(self.geometry)
        return XRayTransform(self.geometry, 1.0 / raw.estimate_norm(iterations, seed))


def radon_forward(u: np.ndarray, g: ScanGeometry) -> np.ndarray:
    return XRayTransform(g).forward(u)


def radon_adjoint(m: np.ndarray, g: ScanGeometry) -> np.ndarray:
    return XRayTransform(g).adjoint(m)


def fbp(m: np.ndarray, g: ScanGeometry, window: str | None = None, scale: float = 1.0) -> np.ndarray:
    return XRayTransform(g, scale).fbp(m, window)


def estimate_operator_norm(op, iterations: int = 100, seed: int = 0, rtol: float = 1e-4) -> float:
    """Spectral norm of the operator by power iteration on ``R^T R``.

    ``op`` is an :class:`XRayTransform` or a :class:`ScanGeometry`.
    """
    if iterations < 10:
        raise InvalidArgumentError("power iteration needs at least 10 iterations")
    if isinstance(op, ScanGeometry):
        op = XRayTransform(op)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.geometry.shape)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iterations):
        y = op.normal(x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if lam > 0 and abs(new - lam) <= rtol * new:
            lam = new
            break
        lam = new
    return math.sqrt(lam)


def save_sinogram(path, m: np.ndarray, g: ScanGeometry, scale: float = 1.0) -> None:
    """Write ``<path>.f32`` (little-endian float32) and ``<path>.json``."""
    path = Path(path)
    data = np.asarray(m, dtype="<f4")
    if data.shape != g.sinogram_shape:
        raise GeometryMismatchError(f"sinogram shape {data.shape} does not match {g.sinogram_shape}")
    path.with_suffix(".f32").write_bytes(data.tobytes())
    sidecar = {"shape": list(data.shape), "geometry": g.to_dict(), "scale": scale}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_sinogram(path) -> tuple[np.ndarray, ScanGeometry, float]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    g = ScanGeometry.from_dict(meta["geometry"])
    raw = path.with_suffix(".f32").read_bytes()
    shape = tuple(meta["shape"])
    if len(raw) != 4 * shape[0] * shape[1] or shape != g.sinogram_shape:
        raise CorruptDatasetError(f"{path.with_suffix('.f32')}: size does not match sidecar")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy(), g, float(meta["scale"])
