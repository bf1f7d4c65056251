import json
import math

import numpy as np
import pytest

from microct.errors import CorruptDatasetError, InvalidArgumentError, UnsupportedVersionError
from microct.geometry import limited_geometry, sparse_geometry
from microct.phantoms import (
    EllipseSpec,
    PhantomConfig,
    generate_dataset,
    generate_phantom,
    rasterize,
    read_dataset,
    simulate_measurement,
)
from microct.xray import XRayTransform

G = limited_geometry(32, math.pi / 3, 20)


def test_disk_area_matches_analytic():
    img = rasterize([EllipseSpec((0.0, 0.0), (0.5, 0.5), 0.0, 1.0)], 128, supersample=8)
    area = img.sum() * (2 / 128) ** 2
    assert area == pytest.approx(math.pi * 0.25, rel=2e-3)


def test_orientation_convention():
    # a disk at x1 > 0, x2 > 0 lands in the upper-right quadrant of the array
    img = rasterize([EllipseSpec((0.5, 0.5), (0.2, 0.2), 0.0, 1.0)], 64)
    assert img[:32, 32:].sum() > 0.99 * img.sum()


def test_rotation_swaps_axes():
    a = rasterize([EllipseSpec((0.0, 0.0), (0.6, 0.2), math.pi / 2, 1.0)], 64, supersample=8)
    b = rasterize([EllipseSpec((0.0, 0.0), (0.2, 0.6), 0.0, 1.0)], 64, supersample=8)
    assert np.abs(a - b).max() < 1e-12


def test_overlaps_clip_to_unit_range():
    img = rasterize([EllipseSpec((0, 0), (0.5, 0.5), 0, 0.8)] * 3, 32)
    assert img.max() == 1.0 and img.min() == 0.0


def test_boundary_normals_are_outward_and_perpendicular():
    e = EllipseSpec((0.1, -0.2), (0.5, 0.2), 0.4, 1.0)
    pts, normals = e.boundary(64)
    a, b = e.semi_axes
    for p, n in zip(pts, normals):
        y1, y2 = e._local(p[0], p[1])
        assert (y1 / a) ** 2 + (y2 / b) ** 2 == pytest.approx(1.0)
        step = 1e-4 * np.array([math.cos(n), math.sin(n)])
        assert not e.inside(*(p + step)) and e.inside(*(p - step))


def test_phantoms_are_pure_in_seed():
    a, sa = generate_phantom(np.random.SeedSequence(3), 32)
    b, sb = generate_phantom(np.random.SeedSequence(3), 32)
    c, _ = generate_phantom(np.random.SeedSequence(4), 32)
    assert np.array_equal(a, b) and sa == sb
    assert not np.array_equal(a, c)


def test_phantoms_stay_inside_disk():
    for s in range(20):
        _, specs = generate_phantom(s, 32)
        assert 3 <= len(specs) <= 8
        for e in specs:
            assert math.hypot(*e.center) + max(e.semi_axes) <= 0.95 + 1e-12


def test_noise_level():
    u = rasterize([EllipseSpec((0, 0), (0.5, 0.3), 0.2, 1.0)], 32)
    clean = simulate_measurement(u, G, 0.0, 0)
    noisy = simulate_measurement(u, G, 0.05, 0)
    assert np.std(noisy - clean) == pytest.approx(0.05 * clean.max(), rel=0.1)
    assert np.allclose(clean, XRayTransform(G).normalized().forward(u))


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        PhantomConfig(count_range=(0, 2))
    with pytest.raises(InvalidArgumentError):
        PhantomConfig(axis_range=(0.1, 2.0))
    with pytest.raises(InvalidArgumentError):
        EllipseSpec((0, 0), (0.0, 1.0), 0, 1)


def test_dataset_round_trip(tmp_path):
    man = generate_dataset(tmp_path / "d", G, 4, 2, seed=3)
    ds = read_dataset(tmp_path / "d")
    assert ds.count("train") == 4 and ds.count("test") == 2
    assert man["geometry_hash"] == G.digest()
    assert ds.images["train"].shape == (4, 32, 32)
    assert ds.sinograms["test"].shape == (2,) + G.sinogram_shape
    specs = ds.specs("train", 1)
    img = rasterize(specs, 32).astype(np.float32)
    assert np.array_equal(img, ds.images["train"][1])


def test_dataset_independent_of_workers_and_counts(tmp_path):
    generate_dataset(tmp_path / "a", G, 3, 1, seed=8, workers=1)
    generate_dataset(tmp_path / "b", G, 5, 2, seed=8, workers=3)
    a, b = read_dataset(tmp_path / "a"), read_dataset(tmp_path / "b")
    assert np.array_equal(a.images["train"], b.images["train"][:3])
    assert np.array_equal(a.sinograms["test"], b.sinograms["test"][:1])


def test_refuses_non_empty_directory(tmp_path):
    generate_dataset(tmp_path / "d", G, 1, 1)
    with pytest.raises(InvalidArgumentError):
        generate_dataset(tmp_path / "d", G, 1, 1)
    generate_dataset(tmp_path / "d", sparse_geometry(32, 6), 1, 1, force=True)
    assert read_dataset(tmp_path / "d").geometry.angle_set.kind == "sparse"


def test_corruption_names_the_file(tmp_path):
    generate_dataset(tmp_path / "d", G, 2, 1, seed=1)
    f = tmp_path / "d" / "sinograms" / "train_00001.f32"
    raw = bytearray(f.read_bytes())
    raw[10] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(CorruptDatasetError, match="train_00001"):
        read_dataset(tmp_path / "d")
    f.write_bytes(bytes(raw[:-4]))
    with pytest.raises(CorruptDatasetError, match="train_00001"):
        read_dataset(tmp_path / "d")


def test_version_bump_rejected(tmp_path):
    generate_dataset(tmp_path / "d", G, 1, 0)
    mpath = tmp_path / "d" / "manifest.json"
    man = json.loads(mpath.read_text())
    man["version"] = 99
    mpath.write_text(json.dumps(man))
    with pytest.raises(UnsupportedVersionError):
        read_dataset(tmp_path / "d")


def test_missing_manifest(tmp_path):
    with pytest.raises(CorruptDatasetError):
        read_dataset(tmp_path)
