"""PSNR and SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgumentError

PSNR_CAP = 99.0


def _pair(u, ref):
    u = np.asarray(u, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if u.shape != ref.shape:
        raise InvalidArgumentError(f"shape mismatch: {u.shape} vs {ref.shape}")
    return u, ref


def psnr(u, ref, data_range: float | None = None) -> float:
    """Peak SNR in dB with the range of ``ref``; capped at 99 dB."""
    u, ref = _pair(u, ref)
    rng = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    mse = float(np.mean((u - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    if rng == 0.0:
        return -math.inf
    return min(PSNR_CAP, 10.0 * math.log10(rng * rng / mse))


def ssim(u, ref, data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use sample covariances and a 5-pixel border is
    discarded, the conventional setup for the Gaussian-window variant.
    """
    u, ref = _pair(u, ref)
    L = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    if L == 0.0:
        L = 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    filt = dict(sigma=1.5, truncate=3.5, mode="reflect")
    npix = 11 * 11
    cov = npix / (npix - 1)
    mu_x, mu_y = gaussian_filter(u, **filt), gaussian_filter(ref, **filt)
    vx = cov * (gaussian_filter(u * u, **filt) - mu_x * mu_x)
    vy = cov * (gaussian_filter(ref * ref, **filt) - mu_y * mu_y)
    vxy = cov * (gaussian_filter(u * ref, **filt) - mu_x * mu_y)
    num = (2 * mu_x * mu_y + c1) * (2 * vxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (vx + vy + c2)
    smap = num / den
    pad = 5
    if min(u.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(np.clip(smap.mean(), -1.0, 1.0))


@dataclass
class MetricReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    def add(self, u, ref) -> None:
        self.psnr.append(psnr(u, ref))
        self.ssim.append(ssim(u, ref))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan


def evaluate(recons, refs) -> MetricReport:
    rep = MetricReport()
    for u, r in zip(recons, refs):
        rep.add(u, r)
    return rep
