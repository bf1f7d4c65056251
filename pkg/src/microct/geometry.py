"""Angle sets and parallel-beam scan geometries.

Conventions used everywhere in the package:

* Physical image coordinates ``x = (x1, x2)``: ``x1`` grows to the right
  (array columns), ``x2`` grows upwards (decreasing row index).  The image
  square is centred on the origin.
* A projection angle ``theta`` is the direction of the line *normal*
  ``omega = (cos theta, sin theta)``; the line ``L(theta, s)`` is
  ``{s * omega + t * omega_perp}`` with ``omega_perp = (-sin theta, cos theta)``.
  Rays at ``theta = 0`` therefore run vertically through the image.
* Angles are kept in ``[-pi/2, pi/2)``; directions are unsigned.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

ANGLE_TOL = 1e-9

LIMITED = "limited"
SPARSE = "sparse"
FULL = "full"


def wrap_angle(omega):
    """Map an angle (or array of angles) to ``[-pi/2, pi/2)`` modulo pi."""
    wrapped = np.mod(np.asarray(omega, dtype=float) + math.pi / 2, math.pi) - math.pi / 2
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def angular_distance(a, b):
    """Unsigned distance between two line directions, in ``[0, pi/2]``."""
    return np.abs(wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


@dataclass(frozen=True)
class AngleSet:
    """The admissible set A of normal directions.

    ``kind`` is one of ``"limited"`` (the interval ``[-gamma, gamma]``),
    ``"sparse"`` (strips of half-width ``eta`` around ``angles``) or
    ``"full"`` (every direction; no boundary).
    """

    kind: str
    gamma: float = 0.0
    angles: tuple[float, ...] = ()
    eta: float = 0.0

    def __post_init__(self):
        if self.kind == LIMITED:
            if not 0.0 < self.gamma < math.pi / 2:
                raise InvalidArgumentError(f"gamma must lie in (0, pi/2), got {self.gamma}")
        elif self.kind == SPARSE:
            if len(self.angles) == 0:
                raise InvalidArgumentError("a sparse angle set needs at least one angle")
            arr = np.asarray(self.angles, dtype=float)
            if np.any(arr < -math.pi / 2 - ANGLE_TOL) or np.any(arr >= math.pi / 2):
                raise InvalidArgumentError("sparse angles must lie in [-pi/2, pi/2)")
            if np.any(np.diff(arr) <= 0):
                raise InvalidArgumentError("sparse angles must be strictly increasing")
            if len(arr) > 1:
                gaps = angular_distance(arr[:, None], arr[None, :])
                np.fill_diagonal(gaps, np.inf)
                if gaps.min() <= ANGLE_TOL:
                    raise InvalidArgumentError("sparse angles must be distinct modulo pi")
            if self.eta < 0:
                raise InvalidArgumentError("eta must be non-negative")
        elif self.kind != FULL:
            raise InvalidArgumentError(f"unknown angle-set kind {self.kind!r}")

    @classmethod
    def limited(cls, gamma: float) -> AngleSet:
        return cls(LIMITED, gamma=float(gamma))

    @classmethod
    def sparse(cls, angles, eta: float = 0.0) -> AngleSet:
        return cls(SPARSE, angles=tuple(float(a) for a in angles), eta=float(eta))

    @classmethod
    def full(cls) -> AngleSet:
        return cls(FULL)

    def contains(self, omega: float) -> bool:
        return angle_set_contains(self, omega)

    def boundary(self) -> tuple[float, ...]:
        """Boundary directions.

        For sparse sets the strips ``omega_i +- eta`` are collapsed onto
        ``omega_i`` itself.
        """
        if self.kind == LIMITED:
            return (-self.gamma, self.gamma)
        if self.kind == SPARSE:
            return tuple(self.angles)
        return ()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "gamma": self.gamma, "angles": list(self.angles), "eta": self.eta}

    @classmethod
    def from_dict(cls, d: dict) -> AngleSet:
        return cls(d["kind"], gamma=float(d.get("gamma", 0.0)),
                   angles=tuple(float(a) for a in d.get("angles", ())),
                   eta=float(d.get("eta", 0.0)))


def angle_set_contains(a: AngleSet, omega: float) -> bool:
    """Membership of the normal direction ``omega`` in ``a``."""
    omega = wrap_angle(omega)
    if a.kind == LIMITED:
        return abs(omega) <= a.gamma + ANGLE_TOL
    if a.kind == SPARSE:
        d = angular_distance(omega, np.asarray(a.angles))
        return bool(d.min() <= a.eta + ANGLE_TOL)
    return True


def uniform_angles(gamma: float, count: int) -> list[float]:
    """``count`` equispaced angles covering ``[-gamma, gamma]`` inclusive."""
    if count < 1:
        raise InvalidArgumentError("count must be at least 1")
    if count == 1:
        return [0.0]
    return [float(x) for x in np.linspace(-gamma, gamma, count)]


def half_circle_angles(count: int) -> list[float]:
    """``count`` equispaced angles over ``[-pi/2, pi/2)``."""
    if count < 1:
        raise InvalidArgumentError("count must be at least 1")
    return [float(-math.pi / 2 + k * math.pi / count) for k in range(count)]


@dataclass(frozen=True)
class ScanGeometry:
    """Discretised parallel-beam geometry.

    The image square has ``image_size`` pixels per side of width
    ``pixel_pitch``; by default it spans ``[-1, 1]^2``.  Detector bins are
    centred on the origin with spacing ``detector_pitch``.
    """

    image_size: int
    angle_set: AngleSet
    angles: tuple[float, ...]
    num_detectors: int = 0
    pixel_pitch: float = 0.0
    detector_pitch: float = 0.0
    _hash: str = field(default="", init=False, repr=False, compare=False)

    def __post_init__(self):
        n = int(self.image_size)
        if n < 2:
            raise InvalidArgumentError("image_size must be at least 2")
        if self.pixel_pitch <= 0:
            object.__setattr__(self, "pixel_pitch", 2.0 / n)
        if self.detector_pitch <= 0:
            object.__setattr__(self, "detector_pitch", self.pixel_pitch)
        if self.num_detectors <= 0:
            object.__setattr__(self, "num_detectors", math.ceil(n * math.sqrt(2.0)))
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if len(self.angles) == 0:
            raise InvalidArgumentError("geometry needs at least one projection angle")
        span = self.num_detectors * self.detector_pitch
        diag = n * self.pixel_pitch * math.sqrt(2.0)
        if span < diag - 1e-12:
            raise InvalidArgumentError("detector does not cover the image diagonal")
        for t in self.angles:
            if not angle_set_contains(self.angle_set, t):
                raise InvalidArgumentError(f"measured angle {t} is outside the angle set")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (len(self.angles), self.num_detectors)

    @property
    def extent(self) -> float:
        return self.image_size * self.pixel_pitch

    @property
    def angular_step(self) -> float:
        """Angular weight of one projection in quadrature over the measured set."""
        k = len(self.angles)
        if self.angle_set.kind == LIMITED and k > 1:
            return 2 * self.angle_set.gamma / (k - 1)
        return math.pi / k

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "pixel_pitch": self.pixel_pitch,
            "num_detectors": self.num_detectors,
            "detector_pitch": self.detector_pitch,
            "angle_set": self.angle_set.to_dict(),
            "angles": list(self.angles),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScanGeometry:
        return cls(
            image_size=int(d["image_size"]),
            angle_set=AngleSet.from_dict(d["angle_set"]),
            angles=tuple(d["angles"]),
            num_detectors=int(d["num_detectors"]),
            pixel_pitch=float(d["pixel_pitch"]),
            detector_pitch=float(d["detector_pitch"]),
        )

    def digest(self) -> str:
        """Stable hash of the geometry, used to pair checkpoints with data."""
        if not self._hash:
            blob = json.dumps(self.to_dict(), sort_keys=True).encode()
            object.__setattr__(self, "_hash", hashlib.sha256(blob).hexdigest()[:16])
        return self._hash


def limited_geometry(size: int, gamma: float, count: int, **kw) -> ScanGeometry:
    return ScanGeometry(size, AngleSet.limited(gamma), tuple(uniform_angles(gamma, count)), **kw)


def sparse_geometry(size: int, count: int, eta: float = 0.0, **kw) -> ScanGeometry:
    angles = half_circle_angles(count)
    return ScanGeometry(size, AngleSet.sparse(angles, eta), tuple(angles), **kw)


def full_geometry(size: int, count: int = 180, **kw) -> ScanGeometry:
    return ScanGeometry(size, AngleSet.full(), tuple(half_circle_angles(count)), **kw)


def parse_geometry(spec: str, size: int, angles: int | None = None) -> ScanGeometry:
    """Parse ``limited:<deg half-width>``, ``sparse:<count>`` or ``full[:<count>]``."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == LIMITED:
            gamma = math.radians(float(arg))
            return limited_geometry(size, gamma, angles or 60)
        if kind == SPARSE:
            return sparse_geometry(size, int(arg))
        if kind == FULL:
            return full_geometry(size, int(arg) if arg else (angles or 180))
    except ValueError as exc:
        raise InvalidArgumentError(f"bad geometry spec {spec!r}: {exc}") from exc
    raise InvalidArgumentError(f"bad geometry spec {spec!r}")
