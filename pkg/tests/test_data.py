import math
import struct

import numpy as np
import pytest

from clcsca import data as D
from clcsca.errors import ContractError, DataError, FormatError
from clcsca.geometry import PointCloud


@pytest.mark.parametrize("kind", D.SHAPE_KINDS)
@pytest.mark.parametrize("noise", [0.0, 0.02])
def test_shapes_are_normalized(kind, noise):
    pc = D.gen_shape(kind, 100, noise, np.random.default_rng(0))
    assert np.linalg.norm(pc.coords.mean(axis=0)) <= 1e-9
    assert abs(np.linalg.norm(pc.coords, axis=1).max() - 1.0) <= 1e-9
    assert len(pc) == 100 and pc.cloud_label == D.SHAPE_KINDS.index(kind)


def test_noiseless_sphere_on_unit_radius():
    pc = D.gen_shape("sphere", 64, 0.0, np.random.default_rng(1))
    np.testing.assert_allclose(np.linalg.norm(pc.coords, axis=1), 1.0, atol=1e-9)


def test_cube_points_lie_on_faces():
    pc = D.gen_shape("cube", 200, 0.0, np.random.default_rng(2), rotate=False)
    # axis-aligned cube centred at the origin: every surface point has the
    # same largest absolute coordinate (the face distance)
    face = np.abs(pc.coords).max(axis=1)
    np.testing.assert_allclose(face, face[0], atol=1e-12)
    # and the far corner of the cube sits at radius 1 after normalisation
    assert face[0] <= 1 / math.sqrt(3) + 0.05


def test_cylinder_and_torus_surfaces():
    rng = np.random.default_rng(3)
    cyl = D.gen_shape("cylinder", 200, 0.0, rng, rotate=False).coords
    r = np.hypot(cyl[:, 0], cyl[:, 1])
    side = np.isclose(r, r.max(), atol=1e-9)
    caps = np.isclose(np.abs(cyl[:, 2]), np.abs(cyl[:, 2]).max(), atol=1e-9)
    assert np.all(side | caps)
    tor = D.gen_shape("torus", 200, 0.0, rng, rotate=False).coords
    # normalisation scales by an unknown t; a point (rho, z) is on the scaled torus iff
    # (rho - R t)^2 + z^2 = (r t)^2, a quadratic in t that every point must share a root of
    R, r = D.TORUS_MAJOR, D.TORUS_MINOR
    rho, z = np.hypot(tor[:, 0], tor[:, 1]), tor[:, 2]
    a, b, c = R * R - r * r, -2 * rho * R, rho * rho + z * z
    disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0))
    roots = np.stack([(-b - disc) / (2 * a), (-b + disc) / (2 * a)], axis=1)
    t = np.median(roots[:, 0])
    assert np.abs(roots - t).min(axis=1).max() <= 1e-6


def test_generation_is_deterministic():
    a = D.gen_shape("torus", 64, 0.02, np.random.default_rng(4))
    b = D.gen_shape("torus", 64, 0.02, np.random.default_rng(4))
    np.testing.assert_array_equal(a.coords, b.coords)
    c = D.gen_part_shape("lamp", 128, np.random.default_rng(4))
    d = D.gen_part_shape("lamp", 128, np.random.default_rng(4))
    np.testing.assert_array_equal(c.coords, d.coords)
    np.testing.assert_array_equal(c.point_labels, d.point_labels)


def test_bad_shape_arguments():
    with pytest.raises(ContractError):
        D.gen_shape("cone", 64, 0.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        D.gen_shape("sphere", 31, 0.0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        D.gen_part_shape("chair", 64, np.random.default_rng(0))


def analytic_areas(kind, dims):
    if kind == "mug":
        r, h = dims["radius"], dims["height"]
        return {0: 2 * math.pi * r * h + math.pi * r * r, 1: 2 * math.pi**2 * dims["handle_major"] * dims["handle_minor"]}
    if kind == "lamp":
        br, bh = dims["base_radius"], dims["base_height"]
        s1, s2, sh = dims["shade_bottom"], dims["shade_top"], dims["shade_height"]
        return {
            2: math.pi * br * br + 2 * math.pi * br * bh,
            3: 2 * math.pi * dims["pole_radius"] * (dims["height"] - bh),
            4: math.pi * (s1 + s2) * math.sqrt((s1 - s2) ** 2 + sh * sh),
        }
    w, d, t = dims["width"], dims["depth"], dims["thickness"]
    return {5: 2 * (w * d + w * t + d * t), 6: 16 * dims["leg_width"] * dims["leg_height"]}


@pytest.mark.parametrize("kind", D.PART_KINDS)
@pytest.mark.parametrize("seed", range(3))
def test_part_counts_follow_area_ratios(kind, seed):
    n = 512
    pc = D.gen_part_shape(kind, n, np.random.default_rng(seed))
    dims, _ = D.part_layout(kind, np.random.default_rng(seed))
    areas = analytic_areas(kind, dims)
    total = sum(areas.values())
    assert set(np.unique(pc.point_labels)) <= set(D.CATEGORY_PARTS[kind])
    for label, area in areas.items():
        assert abs(np.count_nonzero(pc.point_labels == label) - n * area / total) < 1.0


def test_make_dataset_sizes_balance_and_disjointness():
    train, test = D.make_dataset("classification", 5, 3, seed=7, n_points=64)
    assert len(train) == 20 and len(test) == 12
    assert np.bincount([pc.cloud_label for pc in train.samples]).tolist() == [5] * 4
    assert np.bincount([pc.cloud_label for pc in test.samples]).tolist() == [3] * 4
    seen = {pc.coords.tobytes() for pc in train.samples}
    assert not any(pc.coords.tobytes() in seen for pc in test.samples)
    seg_train, _ = D.make_dataset("segmentation", 2, 1, seed=7, n_points=64)
    seg_train.validate()
    assert seg_train.part_map == D.CATEGORY_PARTS
    with pytest.raises(ContractError):
        D.make_dataset("detection", 1, 1, 0)


def test_dataset_validate_flags_bad_labels():
    pc = PointCloud(np.zeros((2, 3)), point_labels=[0, 5], cloud_label=0)
    with pytest.raises(DataError):
        D.Dataset([pc], ["mug"], "segmentation", "train", {"mug": (0, 1)}).validate()


def test_pcld_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(8)
    pc = D.quantize(PointCloud(rng.normal(size=(10, 3)), rng.normal(size=(10, 2)), rng.integers(0, 7, 10), 3))
    D.save_cloud(tmp_path / "a.pcld", pc)
    back = D.load_cloud(tmp_path / "a.pcld")
    np.testing.assert_array_equal(back.coords, pc.coords)
    np.testing.assert_array_equal(back.attrs, pc.attrs)
    assert back.num_attrs == 2
    np.testing.assert_array_equal(back.point_labels, pc.point_labels)
    assert back.cloud_label == 3
    bare = PointCloud(np.ones((1, 3)))
    D.save_cloud(tmp_path / "b.pcld", bare)
    b = D.load_cloud(tmp_path / "b.pcld")
    assert b.point_labels is None and b.cloud_label is None


def test_pcld_byte_layout(tmp_path):
    pc = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([[4.0]]), [5], 6)
    D.save_cloud(tmp_path / "c.pcld", pc)
    raw = (tmp_path / "c.pcld").read_bytes()
    assert raw[:4] == b"PCLD"
    assert struct.unpack_from("<IQII", raw, 4) == (1, 1, 1, 3)
    assert struct.unpack_from("<4f", raw, 24) == (1.0, 2.0, 3.0, 4.0)
    assert struct.unpack_from("<HH", raw, 40) == (5, 6)
    assert len(raw) == 44


def test_pcld_errors_report_offsets(tmp_path):
    pc = PointCloud(np.zeros((4, 3)), point_labels=[0, 1, 2, 3], cloud_label=1)
    D.save_cloud(tmp_path / "ok.pcld", pc)
    raw = (tmp_path / "ok.pcld").read_bytes()
    cases = {
        "trunc": raw[:-3],
        "magic": b"XCLD" + raw[4:],
        "version": raw[:4] + struct.pack("<I", 9) + raw[8:],
        "header": raw[:10],
        "trailing": raw + b"\0",
    }
    for name, blob in cases.items():
        (tmp_path / name).write_bytes(blob)
        with pytest.raises(FormatError, match="byte offset"):
            D.load_cloud(tmp_path / name)


def test_dataset_save_and_load(tmp_path):
    train, test = D.make_dataset("segmentation", 1, 1, seed=2, n_points=64)
    manifest = D.save_dataset(tmp_path, train, test)
    back = D.load_dataset(manifest, "test")
    assert back.task == "segmentation" and back.class_names == list(D.PART_KINDS)
    assert {k: tuple(v) for k, v in back.part_map.items()} == D.CATEGORY_PARTS
    for a, b in zip(test.samples, back.samples):
        np.testing.assert_array_equal(D.quantize(a).coords, b.coords)
        np.testing.assert_array_equal(a.point_labels, b.point_labels)
    with pytest.raises(DataError):
        D.load_dataset(tmp_path, "val")
