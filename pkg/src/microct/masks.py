"""Boolean supports for the learnable convolution filters.

A ``p x p`` patch is indexed by ``(r, c)`` with the origin at the centre
``h = (p - 1) // 2``.  Cell ``(r, c)`` corresponds to the offset vector
``v = (dx, dy) = (c - h, h - r)`` in the image-axis convention of
:mod:`microct.geometry`.

Direction convention: the line attached to a normal direction ``omega`` is
``L(omega, 0) = {t * (-sin omega, cos omega)}``, the direction along which
rays measured at ``omega`` travel.  This is where the kernel of the
normal operator ``R_A^T R_A`` lives, so the masks line up with it:

* ``full``   every cell;
* ``bow``    the double cone of lines ``L(omega, 0)`` with ``|omega| <= gamma``,
  widened to every cell within Euclidean distance ``q + 1/2`` of the cone;
* ``x``      the two lines ``L(+-gamma, 0)``, thickened to stripes of
  half-width ``q + 1/2``;
* ``sparse`` the lines ``L(omega_i, 0)`` for every measured angle, thickened
  the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .geometry import FULL, LIMITED, SPARSE, AngleSet, wrap_angle

KINDS = ("full", "bow", "x", "sparse")
_TOL = 1e-9


@dataclass(frozen=True)
class FilterMask:
    size: int
    kind: str
    q: int
    support: np.ndarray

    @property
    def active_count(self) -> int:
        return int(self.support.sum())

    def __hash__(self):
        return hash((self.size, self.kind, self.q, self.support.tobytes()))

    def __eq__(self, other):
        return (isinstance(other, FilterMask) and self.size == other.size
                and self.kind == other.kind and self.q == other.q
                and np.array_equal(self.support, other.support))


def _offsets(p: int):
    h = (p - 1) // 2
    r, c = np.mgrid[0:p, 0:p]
    return (c - h).astype(float), (h - r).astype(float)


def _line_direction(omega: float) -> tuple[float, float]:
    return -math.sin(omega), math.cos(omega)


def _stripe(dx, dy, omega: float, q: int) -> np.ndarray:
    # distance to L(omega, 0) is |v . (cos, sin)|
    dist = np.abs(dx * math.cos(omega) + dy * math.sin(omega))
    return dist <= q + 0.5 + _TOL


def _euclid_to_ray(px: float, py: float, rx: float, ry: float) -> float:
    t = px * rx + py * ry
    if t <= 0:
        return math.hypot(px, py)
    return abs(px * ry - py * rx)


def _cone(dx, dy, gamma: float, q: int) -> np.ndarray:
    # normal direction of the line through the origin and v
    phi = np.arctan2(dy, dx)
    normal = wrap_angle(phi - math.pi / 2)
    inside = np.abs(normal) <= gamma + _TOL
    inside |= (dx == 0) & (dy == 0)
    rays = []
    for om in (-gamma, gamma):
        rx, ry = _line_direction(om)
        rays += [(rx, ry), (-rx, -ry)]
    out = inside.copy()
    for idx in zip(*np.nonzero(~inside)):
        px, py = float(dx[idx]), float(dy[idx])
        if min(_euclid_to_ray(px, py, rx, ry) for rx, ry in rays) <= q + 0.5 + _TOL:
            out[idx] = True
    return out


def build_mask(kind: str, a: AngleSet, p: int, q: int = 0) -> FilterMask:
    """Support of the ``kind`` filter geometry for angle set ``a``."""
    if kind not in KINDS:
        raise InvalidArgumentError(f"unknown mask kind {kind!r}")
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"filter size must be odd, got {p}")
    if q < 0:
        raise InvalidArgumentError("q must be non-negative")
    if kind in ("bow", "x") and a.kind != LIMITED:
        raise InvalidArgumentError(f"{kind} masks need a limited-angle set, got {a.kind}")
    if kind == "sparse" and a.kind != SPARSE:
        raise InvalidArgumentError(f"sparse masks need a sparse angle set, got {a.kind}")
    dx, dy = _offsets(p)
    if kind == "full":
        support = np.ones((p, p), dtype=bool)
    elif kind == "bow":
        support = _cone(dx, dy, a.gamma, q)
    elif kind == "x":
        support = _stripe(dx, dy, a.gamma, q) | _stripe(dx, dy, -a.gamma, q)
    else:
        support = np.zeros((p, p), dtype=bool)
        for om in a.angles:
            support |= _stripe(dx, dy, om, q)
    h = (p - 1) // 2
    support[h, h] = True
    support.setflags(write=False)
    return FilterMask(p, kind, q, support)


def compatible(kind: str, a: AngleSet) -> bool:
    if kind in ("bow", "x"):
        return a.kind == LIMITED
    if kind == "sparse":
        return a.kind == SPARSE
    return kind == "full" and a.kind in (LIMITED, SPARSE, FULL)


def to_pbm(mask: FilterMask) -> bytes:
    """Plain-text PBM (P1); black cells are inside the support."""
    rows = [" ".join("1" if v else "0" for v in row) for row in mask.support]
    return ("P1\n%d %d\n" % (mask.size, mask.size) + "\n".join(rows) + "\n").encode()
