"""Orthonormal multilevel 2D Haar transform with explicit subband bookkeeping.

Coefficients live in the usual nested layout: the approximation block sits
in the top-left corner; at every level of side ``s`` the three detail
blocks occupy

* ``(h)``  rows ``[0, s)``,  cols ``[s, 2s)``  -- wavelet across columns, scaling down rows
* ``(v)``  rows ``[s, 2s)``, cols ``[0, s)``   -- scaling across columns, wavelet down rows
* ``(d)``  rows ``[s, 2s)``, cols ``[s, 2s)``  -- wavelet in both directions

Subbands are numbered coarse to fine: ``0`` is the approximation ``(f)``,
then ``(h), (v), (d)`` of the coarsest level, and so on, giving
``Q = 3 * levels + 1`` subbands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class Subband:
    iota: int
    scale: int          # log2 of the subband side
    orientation: str    # one of "f", "h", "v", "d"
    rows: slice
    cols: slice

    @property
    def side(self) -> int:
        return self.rows.stop - self.rows.start


def num_subbands(levels: int) -> int:
    return 3 * levels + 1


def subband_layout(side: int, levels: int) -> list[Subband]:
    if levels < 0 or side % (1 << levels):
        raise InvalidArgumentError(f"side {side} is not divisible by 2**{levels}")
    coarse = side >> levels
    out = [Subband(0, int(math.log2(coarse)), "f", slice(0, coarse), slice(0, coarse))]
    iota = 1
    for lev in range(levels, 0, -1):
        s = side >> lev
        j = int(math.log2(s))
        out.append(Subband(iota, j, "h", slice(0, s), slice(s, 2 * s)))
        out.append(Subband(iota + 1, j, "v", slice(s, 2 * s), slice(0, s)))
        out.append(Subband(iota + 2, j, "d", slice(s, 2 * s), slice(s, 2 * s)))
        iota += 3
    return out


@dataclass
class WaveletCoeffs:
    """Haar coefficients of one image (or a stack, leading axes allowed)."""

    data: np.ndarray
    levels: int

    @property
    def side(self) -> int:
        return self.data.shape[-1]

    @property
    def num_subbands(self) -> int:
        return num_subbands(self.levels)

    @property
    def subband_index(self) -> list[Subband]:
        return subband_layout(self.side, self.levels)

    def subband(self, iota: int) -> np.ndarray:
        return subband_view(self, iota)

    def copy(self) -> WaveletCoeffs:
        return WaveletCoeffs(self.data.copy(), self.levels)


def _check(side: int, levels: int):
    if levels < 0:
        raise InvalidArgumentError("levels must be non-negative")
    if side % (1 << levels):
        raise InvalidArgumentError(f"image side {side} is not divisible by 2**{levels}")


def haar_analyze_array(u: np.ndarray, levels: int) -> np.ndarray:
    """Analysis on raw arrays of shape ``(..., n, n)``."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != u.shape[-2]:
        raise InvalidArgumentError("images must be square")
    _check(u.shape[-1], levels)
    out = u.copy()
    s = u.shape[-1]
    for _ in range(levels):
        a = out[..., :s, :s]
        lo_c = (a[..., 0::2] + a[..., 1::2]) * _SQRT1_2
        hi_c = (a[..., 0::2] - a[..., 1::2]) * _SQRT1_2
        h = s // 2
        blk = np.empty_like(a)
        blk[..., :h, :h] = (lo_c[..., 0::2, :] + lo_c[..., 1::2, :]) * _SQRT1_2
        blk[..., h:, :h] = (lo_c[..., 0::2, :] - lo_c[..., 1::2, :]) * _SQRT1_2
        blk[..., :h, h:] = (hi_c[..., 0::2, :] + hi_c[..., 1::2, :]) * _SQRT1_2
        blk[..., h:, h:] = (hi_c[..., 0::2, :] - hi_c[..., 1::2, :]) * _SQRT1_2
        out[..., :s, :s] = blk
        s = h
    return out


def haar_synthesize_array(w: np.ndarray, levels: int) -> np.ndarray:
    """Synthesis on raw arrays; exact inverse (and transpose) of the analysis."""
    w = np.asarray(w, dtype=np.float64)
    _check(w.shape[-1], levels)
    out = w.copy()
    s = w.shape[-1] >> levels
    for _ in range(levels):
        blk = out[..., : 2 * s, : 2 * s]
        ff, vv = blk[..., :s, :s], blk[..., s:, :s]
        hh, dd = blk[..., :s, s:], blk[..., s:, s:]
        lo_c = np.empty(blk.shape[:-1] + (s,))
        hi_c = np.empty_like(lo_c)
        lo_c[..., 0::2, :] = (ff + vv) * _SQRT1_2
        lo_c[..., 1::2, :] = (ff - vv) * _SQRT1_2
        hi_c[..., 0::2, :] = (hh + dd) * _SQRT1_2
        hi_c[..., 1::2, :] = (hh - dd) * _SQRT1_2
        rec = np.empty(blk.shape)
        rec[..., 0::2] = (lo_c + hi_c) * _SQRT1_2
        rec[..., 1::2] = (lo_c - hi_c) * _SQRT1_2
        out[..., : 2 * s, : 2 * s] = rec
        s *= 2
    return out


def haar_analyze(u: np.ndarray, levels: int) -> WaveletCoeffs:
    return WaveletCoeffs(haar_analyze_array(u, levels), levels)


def haar_synthesize(w: WaveletCoeffs) -> np.ndarray:
    return haar_synthesize_array(w.data, w.levels)


def subband_view(w: WaveletCoeffs, iota: int) -> np.ndarray:
    """Writable view on subband ``iota`` of ``w``."""
    q = num_subbands(w.levels)
    if not 0 <= iota < q:
        raise InvalidArgumentError(f"subband index {iota} outside [0, {q})")
    sb = subband_layout(w.side, w.levels)[iota]
    return w.data[..., sb.rows, sb.cols]
