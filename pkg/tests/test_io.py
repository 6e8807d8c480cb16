import json
import struct

import numpy as np
import pytest

from radepth import io
from radepth.geometry import CameraIntrinsics
from radepth.structures import DepthMap, InputError


def _depth(rng, h=6, w=7):
    mm = rng.integers(1, 65535, (h, w))
    mm[0, 0] = 0
    valid = mm > 0
    return DepthMap(mm / 1000.0, valid)


def test_png16_round_trip_is_exact_in_millimeters(tmp_path, rng):
    d = _depth(rng)
    io.write_depth_png16(tmp_path / "d.png", d)
    back = io.read_depth_png16(tmp_path / "d.png")
    assert np.array_equal(back.valid, d.valid)
    assert np.array_equal(np.round(back.values * 1000), np.round(d.values * 1000))
    with pytest.raises(InputError):
        io.write_depth_png16(tmp_path / "x.png", DepthMap.from_array(np.full((2, 2), 70.0)))


def test_pfm_round_trip_is_float32_exact(tmp_path, rng):
    v = rng.uniform(0.1, 80, (5, 9)).astype(np.float32).astype(np.float64)
    v[2, 3] = 0
    d = DepthMap.from_array(v)
    io.write_pfm(tmp_path / "d.pfm", d)
    back = io.read_pfm(tmp_path / "d.pfm")
    assert np.array_equal(back.values, d.values) and np.array_equal(back.valid, d.valid)


def test_pfm_layout_and_big_endian(tmp_path):
    d = DepthMap.from_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
    io.write_pfm(tmp_path / "d.pfm", d)
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    # rows are stored bottom to top
    assert struct.unpack("<4f", raw[-16:]) == (3.0, 4.0, 1.0, 2.0)
    be = b"Pf\n2 2\n1.0\n" + struct.pack(">4f", 3.0, 4.0, 1.0, np.inf)
    (tmp_path / "be.pfm").write_bytes(be)
    back = io.read_pfm(tmp_path / "be.pfm")
    assert back.values[0, 0] == 1.0 and not back.valid[0, 1]
    (tmp_path / "bad.pfm").write_bytes(b"PF\n1 1\n-1\n" + bytes(12))
    with pytest.raises(InputError):
        io.read_pfm(tmp_path / "bad.pfm")


def test_labels_and_image_round_trip(tmp_path, rng):
    labels = rng.integers(0, 40000, (5, 5))
    io.write_labels(tmp_path / "l.png", labels)
    assert np.array_equal(io.read_labels(tmp_path / "l.png"), labels)
    img = rng.integers(0, 256, (4, 6, 3)) / 255.0
    io.write_image(tmp_path / "i.png", img)
    assert np.allclose(io.read_image(tmp_path / "i.png"), img)


def test_turbo_table():
    assert io.turbo(0.0).tolist() == [48, 18, 59]
    assert io.turbo(1.0).tolist() == [122, 4, 3]
    assert io.turbo(0.5).tolist() == [164, 252, 60]
    # halfway between the first two stops
    assert np.abs(io.turbo(1 / 16).astype(int) - [59, 62.5, 143]).max() <= 0.5
    rgb = io.false_color(np.array([[1.0, 2.0], [3.0, np.nan]]))
    assert rgb[1, 1].tolist() == [0, 0, 0]
    assert rgb[0, 0].tolist() == [48, 18, 59] and rgb[1, 0].tolist() == [122, 4, 3]


def test_manifest_round_trip(tmp_path, rng):
    K = CameraIntrinsics(50, 50, 31.5, 31.5)
    entries = [io.write_sample(tmp_path, f"s{i}", rng.random((8, 8, 3)), _depth(rng, 8, 8), K, i, "pfm",
                               classes=rng.integers(0, 5, (8, 8))) for i in range(3)]
    m = io.DatasetManifest("train", entries, "pfm", resolution=(8, 8))
    io.save_manifest(m, tmp_path / "m.json")
    back = io.load_manifest(tmp_path / "m.json")
    assert back == m
    e = back.load(1)
    assert e.K == K and e.scene_id == 1 and e.classes.shape == (8, 8) and e.segments is None


def test_manifest_errors(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"split": "valid", "entries": []}))
    with pytest.raises(InputError):
        io.load_manifest(tmp_path / "m.json")
    (tmp_path / "m.json").write_text(json.dumps({"split": "test", "entries": [
        {"image": "nope.png", "depth": "nope.png", "intrinsics": {"fx": 1, "fy": 1, "cx": 0, "cy": 0},
         "scene_id": 0}]}))
    with pytest.raises(InputError):
        io.load_manifest(tmp_path / "m.json")
    (tmp_path / "m.json").write_text("{")
    with pytest.raises(InputError):
        io.load_manifest(tmp_path / "m.json")
