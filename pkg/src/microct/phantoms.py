"""Random ellipse phantoms, noisy measurements and on-disk datasets.

Dataset layout::

    <root>/manifest.json
    <root>/images/<split>_<idx>.f32       little-endian float32, n x n
    <root>/sinograms/<split>_<idx>.f32    little-endian float32, angles x detectors
    <root>/specs/<split>_<idx>.json       analytic ellipse parameters

Every sample draws its randomness from ``SeedSequence([seed, split, idx])``
so content never depends on generation order or worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptDatasetError, InvalidArgumentError, UnsupportedVersionError
from .geometry import ScanGeometry
from .xray import XRayTransform, estimate_operator_norm

DATASET_VERSION = 1
SPLITS = ("train", "test")


@dataclass(frozen=True)
class EllipseSpec:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float
    intensity: float

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise InvalidArgumentError("semi-axes must be positive")

    def _local(self, x1, x2):
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        d1, d2 = x1 - self.center[0], x2 - self.center[1]
        return c * d1 + s * d2, -s * d1 + c * d2

    def inside(self, x1, x2) -> np.ndarray:
        a, b = self.semi_axes
        y1, y2 = self._local(np.asarray(x1), np.asarray(x2))
        return (y1 / a) ** 2 + (y2 / b) ** 2 <= 1.0

    def boundary(self, count: int) -> tuple[np.ndarray, np.ndarray]:
        """``count`` rim points ``(count, 2)`` and their outward normal angles."""
        a, b = self.semi_axes
        t = np.linspace(0.0, 2 * math.pi, count, endpoint=False)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        y1, y2 = a * np.cos(t), b * np.sin(t)
        pts = np.stack([self.center[0] + c * y1 - s * y2, self.center[1] + s * y1 + c * y2], axis=1)
        n1, n2 = np.cos(t) / a, np.sin(t) / b          # gradient of the implicit form
        normals = np.arctan2(s * n1 + c * n2, c * n1 - s * n2)
        return pts, normals

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EllipseSpec:
        return cls(tuple(d["center"]), tuple(d["semi_axes"]), float(d["rotation"]), float(d["intensity"]))


@dataclass(frozen=True)
class PhantomConfig:
    count_range: tuple[int, int] = (3, 8)
    axis_range: tuple[float, float] = (0.05, 0.45)
    intensity_range: tuple[float, float] = (0.2, 1.0)
    disk_radius: float = 0.95
    supersample: int = 4
    ramp: bool = False

    def __post_init__(self):
        lo, hi = self.count_range
        if not 1 <= lo <= hi:
            raise InvalidArgumentError("count range must satisfy 1 <= lo <= hi")
        if not 0 < self.axis_range[0] <= self.axis_range[1] < self.disk_radius:
            raise InvalidArgumentError("axis range must be positive and fit inside the disk")
        if self.intensity_range[0] > self.intensity_range[1]:
            raise InvalidArgumentError("intensity range is reversed")
        if self.supersample < 1:
            raise InvalidArgumentError("supersample must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PhantomConfig:
        return cls(tuple(d["count_range"]), tuple(d["axis_range"]), tuple(d["intensity_range"]),
                   float(d["disk_radius"]), int(d["supersample"]), bool(d.get("ramp", False)))


def _sample_ellipses(rng: np.random.Generator, cfg: PhantomConfig) -> list[EllipseSpec]:
    count = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    out = []
    for _ in range(count):
        a, b = rng.uniform(*cfg.axis_range, size=2)
        rot = rng.uniform(-math.pi / 2, math.pi / 2)
        room = cfg.disk_radius - max(a, b)
        rad = room * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * math.pi)
        val = rng.uniform(*cfg.intensity_range)
        out.append(EllipseSpec((rad * math.cos(ang), rad * math.sin(ang)), (a, b), rot, val))
    return out


def rasterize(specs: list[EllipseSpec], size: int, supersample: int = 4, ramp: bool = False) -> np.ndarray:
    """Area-sampled raster on ``[-1, 1]^2``, clipped to ``[0, 1]``."""
    pitch = 2.0 / size
    sub = (np.arange(supersample) + 0.5) / supersample - 0.5
    centre = (size - 1) / 2
    x1 = ((np.arange(size) - centre)[:, None] + sub[None, :]).ravel() * pitch
    x2 = ((centre - np.arange(size))[:, None] - sub[None, :]).ravel() * pitch
    X1, X2 = np.meshgrid(x1, x2)
    fine = np.zeros_like(X1)
    for e in specs:
        hit = e.inside(X1, X2)
        if ramp:
            y1, _ = e._local(X1, X2)
            fine += np.where(hit, e.intensity * (0.75 + 0.25 * y1 / e.semi_axes[0]), 0.0)
        else:
            fine += np.where(hit, e.intensity, 0.0)
    img = fine.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def generate_phantom(seed, size: int, config: PhantomConfig | None = None):
    """Random ellipse image and its analytic description; pure in its inputs."""
    cfg = config or PhantomConfig()
    rng = np.random.default_rng(seed)
    specs = _sample_ellipses(rng, cfg)
    return rasterize(specs, size, cfg.supersample, cfg.ramp), specs


def simulate_measurement(u: np.ndarray, g: ScanGeometry, sigma_rel: float, seed,
                         scale: float | None = None) -> np.ndarray:
    """Normalised projection plus white Gaussian noise.

    The noise standard deviation is ``sigma_rel * max(R u)``.  ``scale``
    defaults to ``1 / ||R||``.
    """
    if sigma_rel < 0:
        raise InvalidArgumentError("sigma_rel must be non-negative")
    if scale is None:
        scale = 1.0 / estimate_operator_norm(g)
    clean = XRayTransform(g, scale).forward(u)
    if sigma_rel == 0:
        return clean
    rng = np.random.default_rng(seed)
    return clean + sigma_rel * float(clean.max()) * rng.standard_normal(clean.shape)


# -- persistence -----------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    sinogram: np.ndarray
    specs: list[EllipseSpec] = field(default_factory=list)


@dataclass
class Dataset:
    """In-memory view of a dataset directory (arrays are float64 copies)."""

    root: Path
    manifest: dict
    geometry: ScanGeometry
    scale: float
    images: dict[str, np.ndarray]
    sinograms: dict[str, np.ndarray]

    def specs(self, split: str, idx: int) -> list[EllipseSpec]:
        entry = self.manifest["samples"][split][idx]
        raw = json.loads((self.root / entry["spec"]).read_text())
        return [EllipseSpec.from_dict(d) for d in raw]

    def count(self, split: str) -> int:
        return len(self.manifest["samples"][split])


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def write_dataset(path, geometry: ScanGeometry, scale: float, samples: dict[str, list[Sample]],
                  meta: dict | None = None, force: bool = False) -> dict:
    """Write samples and a manifest; refuses a non-empty directory unless ``force``."""
    root = Path(path)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise InvalidArgumentError(f"{root} exists and is not empty (use force)")
        shutil.rmtree(root)
    for sub in ("images", "sinograms", "specs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    listing = {}
    for split in SPLITS:
        entries = []
        for i, s in enumerate(samples.get(split, [])):
            stem = f"{split}_{i:05d}"
            img = np.asarray(s.image, dtype="<f4")
            sino = np.asarray(s.sinogram, dtype="<f4")
            if img.shape != geometry.shape or sino.shape != geometry.sinogram_shape:
                raise InvalidArgumentError(f"sample {stem} does not match the geometry")
            files = {
                "image": (f"images/{stem}.f32", img.tobytes()),
                "sinogram": (f"sinograms/{stem}.f32", sino.tobytes()),
                "spec": (f"specs/{stem}.json",
                         json.dumps([e.to_dict() for e in s.specs], indent=1).encode()),
            }
            entry = {}
            for key, (rel, blob) in files.items():
                (root / rel).write_bytes(blob)
                entry[key] = rel
                entry[key + "_sha256"] = _sha(blob)
            entries.append(entry)
        listing[split] = entries
    manifest = {
        "version": DATASET_VERSION,
        "geometry": geometry.to_dict(),
        "geometry_hash": geometry.digest(),
        "scale": scale,
        "counts": {k: len(v) for k, v in listing.items()},
        **(meta or {}),
        "samples": listing,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _load_f32(root: Path, rel: str, shape, digest: str | None) -> np.ndarray:
    f = root / rel
    try:
        blob = f.read_bytes()
    except FileNotFoundError as exc:
        raise CorruptDatasetError(f"{f}: missing file") from exc
    if len(blob) != 4 * shape[0] * shape[1]:
        raise CorruptDatasetError(f"{f}: expected {4 * shape[0] * shape[1]} bytes, found {len(blob)}")
    if digest and _sha(blob) != digest:
        raise CorruptDatasetError(f"{f}: checksum mismatch")
    return np.frombuffer(blob, dtype="<f4").reshape(shape)


def read_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise CorruptDatasetError(f"{mpath}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"{mpath}: unreadable manifest ({exc})") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise UnsupportedVersionError(f"{mpath}: unsupported dataset version {manifest.get('version')}")
    geometry = ScanGeometry.from_dict(manifest["geometry"])
    if geometry.digest() != manifest.get("geometry_hash"):
        raise CorruptDatasetError(f"{mpath}: geometry hash mismatch")
    images, sinos = {}, {}
    for split in SPLITS:
        entries = manifest["samples"].get(split, [])
        imgs = np.empty((len(entries),) + geometry.shape)
        sns = np.empty((len(entries),) + geometry.sinogram_shape)
        for i, e in enumerate(entries):
            imgs[i] = _load_f32(root, e["image"], geometry.shape, e.get("image_sha256"))
            sns[i] = _load_f32(root, e["sinogram"], geometry.sinogram_shape, e.get("sinogram_sha256"))
        images[split], sinos[split] = imgs, sns
    return Dataset(root, manifest, geometry, float(manifest["scale"]), images, sinos)


def sample_seed(seed: int, split: str, idx: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), SPLITS.index(split), int(idx)])


def make_sample(seed: int, split: str, idx: int, geometry: ScanGeometry, scale: float,
                sigma_rel: float, config: PhantomConfig) -> Sample:
    phantom_seq, noise_seq = sample_seed(seed, split, idx).spawn(2)
    img, specs = generate_phantom(phantom_seq, geometry.image_size, config)
    # the stored image is float32, so project exactly what is stored
    img = img.astype(np.float32).astype(np.float64)
    sino = simulate_measurement(img, geometry, sigma_rel, noise_seq, scale=scale)
    return Sample(img, sino, specs)


def generate_dataset(path, geometry: ScanGeometry, n_train: int, n_test: int, seed: int = 0,
                     sigma_rel: float = 0.01, config: PhantomConfig | None = None,
                     force: bool = False, workers: int = 1) -> dict:
    if n_train < 0 or n_test < 0:
        raise InvalidArgumentError("sample counts must be non-negative")
    cfg = config or PhantomConfig()
    root = Path(path)
    if root.exists() and any(root.iterdir()) and not force:
        raise InvalidArgumentError(f"{root} exists and is not empty (use force)")
    scale = 1.0 / estimate_operator_norm(geometry)
    jobs = [(s, i) for s, n in (("train", n_train), ("test", n_test)) for i in range(n)]

    def build(job):
        return make_sample(seed, job[0], job[1], geometry, scale, sigma_rel, cfg)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            built = list(pool.map(build, jobs))
    else:
        built = [build(j) for j in jobs]
    samples = {"train": built[:n_train], "test": built[n_train:]}
    meta = {"seed": seed, "noise_sigma_rel": sigma_rel, "phantom": cfg.to_dict()}
    return write_dataset(root, geometry, scale, samples, meta, force=force)
