"""PNG export helpers (16-bit grayscale with a min/max sidecar, RGB overlays)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def save_png16(path, img: np.ndarray) -> dict:
    """Write ``img`` min/max-normalised to 16 bits; the range goes to ``<path>.json``."""
    path = Path(path)
    a = np.asarray(img, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros(a.shape) if span == 0 else (a - lo) / span
    data = np.round(scaled * 65535).astype(np.uint16)
    Image.fromarray(data).save(path, format="PNG")
    meta = {"min": lo, "max": hi, "bits": 16}
    Path(str(path) + ".json").write_text(json.dumps(meta))
    return meta


def load_png16(path) -> np.ndarray:
    """Read a PNG written by :func:`save_png16` back to float values."""
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    raw = np.asarray(Image.open(path), dtype=np.float64) / 65535.0
    return meta["min"] + raw * (meta["max"] - meta["min"])


def save_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8), mode="RGB").save(path, format="PNG")


def tile(patches: np.ndarray, pad: int = 1) -> np.ndarray:
    """Arrange a ``(R, C, p, p)`` grid of patches into one image, each tile
    normalised to its own peak magnitude."""
    R, C, p, _ = patches.shape
    out = np.full((R * (p + pad) + pad, C * (p + pad) + pad), 0.5)
    for i in range(R):
        for j in range(C):
            t = patches[i, j]
            peak = np.abs(t).max()
            t = 0.5 + 0.5 * t / peak if peak > 0 else np.full_like(t, 0.5)
            r0, c0 = pad + i * (p + pad), pad + j * (p + pad)
            out[r0:r0 + p, c0:c0 + p] = t
    return out
