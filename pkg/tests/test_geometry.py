import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from radepth.geometry import (
    CameraIntrinsics,
    PointCloud,
    Pose,
    PoseBounds,
    backproject,
    make_context_3d,
    project,
    sample_pose,
)
from radepth.structures import DepthMap, InputError


def _min_z_oracle(points, K, pose, size):
    """Loop over every point; keep the smallest camera-frame z per pixel."""
    h, w = size
    best = np.full(size, np.inf)
    for p in points:
        c = pose.R @ p + pose.t
        if c[2] <= 0:
            continue
        u = K.fx * c[0] / c[2] + K.cx
        v = K.fy * c[1] / c[2] + K.cy
        ui, vi = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
        if 0 <= ui < w and 0 <= vi < h and c[2] < best[vi, ui]:
            best[vi, ui] = c[2]
    return best


def _random_cloud(rng, n=50):
    pts = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(0.5, 4, n)])
    return PointCloud(pts, rng.random((n, 3)), np.zeros((n, 2), int))


def test_backproject_examples():
    d = DepthMap(np.full((5, 4), 4.0), np.ones((5, 4), bool))
    cloud = backproject(np.zeros((5, 4, 3)), d, CameraIntrinsics(1, 1, 0, 0))
    row = np.flatnonzero((cloud.source_pixel == [2, 3]).all(axis=1))[0]
    assert cloud.points[row].tolist() == [8.0, 12.0, 4.0]

    big = np.zeros((481, 641))
    big[240, 320] = 2.5
    cloud = backproject(np.zeros((481, 641, 3)), DepthMap.from_array(big), CameraIntrinsics(500, 500, 320, 240))
    assert len(cloud) == 1
    assert cloud.points[0].tolist() == [0.0, 0.0, 2.5]


def test_invalid_depth_emits_no_point():
    values = np.ones((3, 3))
    valid = np.ones((3, 3), bool)
    valid[1, 1] = False
    cloud = backproject(np.zeros((3, 3, 3)), DepthMap(values, valid), CameraIntrinsics(1, 1, 1, 1))
    assert len(cloud) == 8
    assert not (cloud.source_pixel == [1, 1]).all(axis=1).any()


def test_dimension_mismatch():
    with pytest.raises(InputError):
        backproject(np.zeros((3, 4, 3)), DepthMap.from_array(np.ones((3, 3))), CameraIntrinsics(1, 1, 1, 1))


def test_intrinsics_and_pose_validation():
    with pytest.raises(InputError):
        CameraIntrinsics(0, 1, 0, 0)
    with pytest.raises(InputError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InputError):
        PoseBounds(-1, 0)


def test_identity_round_trip_is_exact(rng):
    depth = rng.uniform(0.5, 8, (24, 32))
    depth[rng.random((24, 32)) < 0.1] = 0
    d = DepthMap.from_array(depth)
    img = rng.random((24, 32, 3))
    K = CameraIntrinsics(30, 28, 15.5, 11.5)
    out_img, out_d = project(backproject(img, d, K), K, Pose.identity(), (24, 32), splat_radius=0)
    assert np.array_equal(out_d.valid, d.valid)
    assert np.abs(out_d.values - d.values)[d.valid].max() < 1e-9
    assert np.abs(out_img - img)[d.valid].max() < 1e-9


def test_point_behind_camera_is_culled():
    cloud = PointCloud(np.array([[0.0, 0.0, -1.0]]), np.ones((1, 3)), np.zeros((1, 2), int))
    _, d = project(cloud, CameraIntrinsics(10, 10, 2, 2), Pose.identity(), (5, 5))
    assert not d.valid.any()


def test_empty_cloud_renders_invalid():
    cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), int))
    img, d = project(cloud, CameraIntrinsics(10, 10, 2, 2), Pose.identity(), (5, 6))
    assert d.shape == (5, 6) and not d.valid.any() and not img.any()


def test_zbuffer_matches_min_z_oracle_on_100_clouds():
    rng = np.random.default_rng(7)
    K = CameraIntrinsics(8, 8, 7.5, 7.5)
    for _ in range(100):
        cloud = _random_cloud(rng)
        pose = sample_pose(rng, PoseBounds(15, 0.2))
        _, d = project(cloud, K, pose, (16, 16), splat_radius=0)
        best = _min_z_oracle(cloud.points, K, pose, (16, 16))
        assert np.array_equal(d.valid, np.isfinite(best))
        assert np.allclose(d.values[d.valid], best[d.valid], rtol=0, atol=1e-12)


def test_splat_fill_uses_nearest_direct_hit_in_window():
    rng = np.random.default_rng(3)
    K = CameraIntrinsics(8, 8, 7.5, 7.5)
    cloud = _random_cloud(rng, 40)
    _, direct = project(cloud, K, Pose.identity(), (16, 16), splat_radius=0)
    _, filled = project(cloud, K, Pose.identity(), (16, 16), splat_radius=1)
    hits = np.where(direct.valid, direct.values, np.inf)
    for v in range(16):
        for u in range(16):
            if direct.valid[v, u]:
                assert filled.values[v, u] == direct.values[v, u]
                continue
            win = hits[max(v - 1, 0): v + 2, max(u - 1, 0): u + 2]
            if np.isfinite(win).any():
                assert filled.values[v, u] == win.min()
            else:
                assert not filled.valid[v, u]


def test_sample_pose_zero_bounds_and_determinism():
    p = sample_pose(np.random.default_rng(0), PoseBounds(0, 0))
    assert np.array_equal(p.R, np.eye(3)) and np.array_equal(p.t, np.zeros(3))
    a = sample_pose(np.random.default_rng(5), PoseBounds(10, 0.3))
    b = sample_pose(np.random.default_rng(5), PoseBounds(10, 0.3))
    assert np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)


def test_sample_pose_sweep_within_bounds():
    rng = np.random.default_rng(11)
    bounds = PoseBounds(12.0, 0.25)
    for _ in range(1000):
        p = sample_pose(rng, bounds)
        assert np.abs(p.R.T @ p.R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(p.R) - 1) < 1e-9
        assert p.angle_deg() <= 12.0 + 1e-9
        assert np.all(np.abs(p.t) <= 0.25)


def test_pose_bounds_scale_with_median_depth():
    d = DepthMap.from_array(np.full((4, 4), 3.0))
    assert PoseBounds.for_depth(d, 10, 0.05).max_translation == pytest.approx(0.15)


def _scene(rng, h=20, w=24):
    depth = rng.uniform(1.0, 3.0, (h, w))
    depth[5:10, 6:12] = 0.8  # a near box to create occlusions
    return rng.random((h, w, 3)), DepthMap.from_array(depth), CameraIntrinsics(20, 20, (w - 1) / 2, (h - 1) / 2)


def test_identity_pose_context_equals_input(rng):
    img, d, K = _scene(rng)
    sample, corr = make_context_3d(img, d, K, Pose.identity())
    assert np.array_equal(sample.depth.values, d.values)
    assert np.array_equal(sample.image, img)
    assert sample.provenance == "augmented"
    p = corr.pairs
    assert len(p) == d.valid.sum()
    assert np.array_equal(p[:, 0:2], p[:, 2:4])


def test_pure_translation_matches_per_pixel_projection(rng):
    img, d, K = _scene(rng)
    pose = Pose(np.eye(3), np.array([0.05, -0.03, 0.02]))
    _, corr = make_context_3d(img, d, K, pose, splat_radius=0)
    assert len(corr) > 0
    for u, v, u2, v2, _ in corr.pairs:
        z = d.values[int(v), int(u)]
        x = np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z]) + pose.t
        assert np.floor(K.fx * x[0] / x[2] + K.cx + 0.5) == u2
        assert np.floor(K.fy * x[1] / x[2] + K.cy + 0.5) == v2


def test_occluded_pixel_is_excluded():
    # near point (0, 0, 1) from pixel (2, 2); far point (0.2, 0, 2) from pixel (3, 2).
    # Translating by tx = 0.2 sends both to u = 4, where the near one wins.
    K = CameraIntrinsics(10, 10, 2, 2)
    depth = np.zeros((5, 5))
    depth[2, 2] = 1.0
    depth[2, 3] = 2.0
    sample, corr = make_context_3d(np.zeros((5, 5, 3)), DepthMap.from_array(depth), K,
                                   Pose(np.eye(3), np.array([0.2, 0, 0])), splat_radius=0)
    assert sample.depth.values[2, 4] == pytest.approx(1.0)
    src = {(int(a), int(b)) for a, b in corr.pairs[:, :2]}
    assert src == {(2, 2)}


def test_zero_visible_points_warns():
    d = DepthMap.from_array(np.full((4, 4), 1.0))
    K = CameraIntrinsics(4, 4, 1.5, 1.5)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        sample, corr = make_context_3d(np.zeros((4, 4, 3)), d, K, Pose(np.eye(3), np.array([0, 0, -5.0])))
    assert len(corr) == 0
    assert sample.meta.get("empty_view")
    assert any(issubclass(w.category, RuntimeWarning) for w in rec)


@given(seed=st.integers(0, 10_000), angle=st.floats(0, 15), frac=st.floats(0, 0.1))
def test_correspondences_reproject(seed, angle, frac):
    rng = np.random.default_rng(seed)
    img, d, K = _scene(rng, 12, 14)
    pose = sample_pose(rng, PoseBounds.for_depth(d, angle, frac))
    sample, corr = make_context_3d(img, d, K, pose)
    for u, v, u2, v2, _ in corr.pairs:
        z = d.values[int(v), int(u)]
        x = pose.R @ np.array([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z]) + pose.t
        pu, pv = K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy
        assert abs(pu - u2) <= 0.5 + 1e-9 and abs(pv - v2) <= 0.5 + 1e-9
        assert abs(x[2] - sample.depth.values[int(v2), int(u2)]) <= 1e-6
