import json
import struct

import numpy as np
import pytest

from _support import random_cloud
from augsplat.camera import Camera
from augsplat.errors import ConfigError, DimensionMismatch, MissingImage, ParseError, VersionMismatch
from augsplat.render import render_3d
from augsplat.scene_io import (load_dataset, load_depth, load_image, load_scene, save_dataset, save_depth,
                               save_image, save_scene)
from augsplat.synthetic import SyntheticSpec, camera_ring, generate_synthetic

FIELDS = ("positions", "quats", "log_scales", "opacity_logits", "sh", "lobe_dirs", "lobe_T", "lobe_beta", "has_lobe")


def f32_cloud(n=1000, order=3, seed=0):
    cloud = random_cloud(np.random.default_rng(seed), n, order=order, lobed_fraction=0.5)
    for f in FIELDS[:-1]:
        setattr(cloud, f, getattr(cloud, f).astype(np.float32).astype(np.float64))
    cloud.lobe_dirs[~cloud.has_lobe] = (0.0, 0.0, 1.0)
    cloud.lobe_T[~cloud.has_lobe] = 1.0
    return cloud


def assert_same(a, b):
    for f in FIELDS:
        assert np.array_equal(getattr(a, f), getattr(b, f)), f


def test_round_trip_bitwise(tmp_path):
    cloud = f32_cloud()
    save_scene(cloud, tmp_path / "s.ply")
    assert_same(cloud, load_scene(tmp_path / "s.ply"))


def test_round_trip_double_precision(tmp_path):
    cloud = random_cloud(np.random.default_rng(1), 50, order=2, lobed_fraction=1.0)
    save_scene(cloud, tmp_path / "d.ply", precision="double")
    assert_same(cloud, load_scene(tmp_path / "d.ply"))


def test_plain_cloud_has_no_lobe_columns(tmp_path):
    cloud = f32_cloud(20, order=1)
    cloud.has_lobe[:] = False
    cloud.lobe_dirs[:] = (0.0, 0.0, 1.0)
    cloud.lobe_T[:] = 1.0
    cloud.lobe_beta[:] = 0.0
    save_scene(cloud, tmp_path / "p.ply")
    header = (tmp_path / "p.ply").read_bytes().split(b"end_header")[0]
    assert b"lobe_t" not in header and b"f_rest_8" in header and b"f_rest_9" not in header
    assert_same(cloud, load_scene(tmp_path / "p.ply"))


def test_truncated_file_raises_parse_error(tmp_path):
    save_scene(f32_cloud(30), tmp_path / "s.ply")
    raw = (tmp_path / "s.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-7])
    with pytest.raises(ParseError) as info:
        load_scene(tmp_path / "t.ply")
    assert info.value.offset is not None and info.value.offset > 0
    (tmp_path / "h.ply").write_bytes(raw[:40])
    with pytest.raises(ParseError):
        load_scene(tmp_path / "h.ply")


def test_version_mismatch(tmp_path):
    save_scene(f32_cloud(3), tmp_path / "s.ply")
    raw = (tmp_path / "s.ply").read_bytes().replace(b"augsplat_version 1", b"augsplat_version 7")
    (tmp_path / "v.ply").write_bytes(raw)
    with pytest.raises(VersionMismatch):
        load_scene(tmp_path / "v.ply")


def test_hand_written_plain_3dgs_ply(tmp_path):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] + [f"f_rest_{i}" for i in range(9)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    header = "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
    header += "".join(f"property float {n}\n" for n in names) + "end_header\n"
    rows = []
    for i in range(2):
        vals = [float(i), 2.0, 3.0, 0, 0, 0, 0.5, -0.5, 0.25] + [0.125 * (j + 1) for j in range(9)]
        vals += [1.5, -2.0, -2.5, -3.0, 1.0, 0.0, 0.0, 0.0]
        rows.append(struct.pack("<" + "f" * len(vals), *vals))
    (tmp_path / "plain.ply").write_bytes(header.encode() + b"".join(rows))
    cloud = load_scene(tmp_path / "plain.ply")
    assert len(cloud) == 2 and cloud.sh_order == 1 and not cloud.has_lobe.any()
    assert np.array_equal(cloud.positions[1], [1.0, 2.0, 3.0])
    # channel-major f_rest: R coefficients first
    assert np.array_equal(cloud.sh[0, 1:, 0], [0.125, 0.25, 0.375])
    assert np.array_equal(cloud.sh[0, 1:, 2], [0.875, 1.0, 1.125])
    assert cloud.opacity_logits[0] == 1.5 and np.array_equal(cloud.log_scales[0], [-2.0, -2.5, -3.0])


def test_depth_round_trip_and_errors(tmp_path):
    d = np.random.default_rng(2).random((5, 7)).astype(np.float32)
    save_depth(d, tmp_path / "a.depth")
    raw = (tmp_path / "a.depth").read_bytes()
    assert raw[:8] == b"AUGDEPTH" and struct.unpack("<II", raw[8:16]) == (7, 5) and len(raw) == 16 + 4 * 35
    assert np.array_equal(load_depth(tmp_path / "a.depth"), d)
    (tmp_path / "b.depth").write_bytes(raw[:-4])
    with pytest.raises(ParseError):
        load_depth(tmp_path / "b.depth")


def test_image_round_trip(tmp_path):
    img = np.random.default_rng(3).integers(0, 256, (6, 9, 3)) / 255.0
    save_image(img, tmp_path / "i.png")
    assert np.array_equal(load_image(tmp_path / "i.png"), img)
    with pytest.raises(MissingImage):
        load_image(tmp_path / "nope.png")


def toy_cameras(n=3):
    return [Camera.look_at([np.cos(a) * 3, np.sin(a) * 3, 1.0], [0, 0, 0], 10, 8) for a in np.linspace(0, 1, n)]


def test_load_dataset_sorted(tmp_path):
    cams = toy_cameras()
    imgs = [np.full((8, 10, 3), i / 4) for i in range(3)]
    save_dataset(tmp_path, imgs, cams, names=["c", "a", "b"])
    views = load_dataset(tmp_path)
    assert [v.name for v in views] == ["a", "b", "c"]
    assert np.allclose(views[0].image, np.round(255 / 4) / 255)


def test_load_dataset_missing_image(tmp_path):
    save_dataset(tmp_path, [np.zeros((8, 10, 3))] * 3, toy_cameras())
    (tmp_path / "images" / "view_001.png").unlink()
    with pytest.raises(MissingImage) as info:
        load_dataset(tmp_path)
    assert "view_001.png" in str(info.value)


def test_load_dataset_dimension_mismatch(tmp_path):
    save_dataset(tmp_path, [np.zeros((8, 10, 3))] * 3, toy_cameras())
    save_image(np.zeros((8, 11, 3)), tmp_path / "images" / "view_002.png")
    with pytest.raises(DimensionMismatch):
        load_dataset(tmp_path)


def test_load_dataset_bad_json(tmp_path):
    (tmp_path / "cameras.json").write_text("[{")
    with pytest.raises(ParseError):
        load_dataset(tmp_path)


SMALL = dict(n_cameras=6, width=24, height=18, grid=6, n_specular=2)


def test_synthetic_deterministic():
    a = generate_synthetic(SyntheticSpec(**SMALL), 3)
    b = generate_synthetic(SyntheticSpec(**SMALL), 3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.images, b.images))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.depths, b.depths))


def test_synthetic_radius_zero_views_identical():
    sc = generate_synthetic(SyntheticSpec(**dict(SMALL, n_specular=0), radius=0.0), 0)
    assert all(np.array_equal(im, sc.images[0]) for im in sc.images[1:])


def test_synthetic_lobes_add_view_variance():
    sc = generate_synthetic(SyntheticSpec(**dict(SMALL, n_specular=4)), 0)

    def spread(cloud):
        imgs = np.stack([render_3d(cloud, c).rgb for c in sc.cameras])
        return float(imgs.var(axis=0).mean())

    assert spread(sc.gt) > spread(sc.diffuse)


def test_synthetic_split_and_validation():
    spec = SyntheticSpec(**dict(SMALL, n_cameras=8))
    sc = generate_synthetic(spec, 0)
    assert sc.split("test") == [2, 6] and len(sc.split("train")) == 6
    assert len(camera_ring(spec)) == 8
    with pytest.raises(ConfigError):
        SyntheticSpec(n_cameras=0).validate()


def test_synthetic_save_loads_back(tmp_path):
    sc = generate_synthetic(SyntheticSpec(**SMALL), 0)
    sc.save(tmp_path)
    views = load_dataset(tmp_path)
    assert len(views) == 6 and {v.split for v in views} == {"train", "test"}
    assert np.max(np.abs(views[0].image - sc.images[0])) <= 0.5 / 255 + 1e-12
    assert len(load_scene(tmp_path / "ground_truth.ply")) == len(sc.gt)
    assert json.loads((tmp_path / "cameras.json").read_text())[0]["image_path"].startswith("images/")
