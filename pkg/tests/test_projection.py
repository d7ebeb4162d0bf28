import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarmos.lidar_io import PointCloud
from lidarmos.projection import (
    EMPTY, FILL_VALUE, ProjectionConfig, back_project, build_range_image, pixel_labels, project_point,
    project_points, project_ranges, save_preview,
)

from oracles import pixel_of

FULL = ProjectionConfig.from_degrees(64, 2048, 3.0, -25.0)
SMALL = ProjectionConfig.from_degrees(64, 256, 3.0, -25.0)


def random_in_fov(rng, n, cfg=SMALL, rmin=1.0, rmax=60.0):
    az = rng.uniform(-math.pi, math.pi, n)
    el = rng.uniform(cfg.fov_down + 1e-4, cfg.fov_up - 1e-4, n)
    r = rng.uniform(rmin, rmax, n)
    return np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], 1)


def test_forward_point_on_horizon():
    # the horizon sits 3 degrees below the top of a 28 degree field of view:
    # floor(3 / 28 * 64) = 6
    assert project_point((1.0, 0.0, 0.0), FULL) == (1024, 6, 1.0)
    assert pixel_of((1.0, 0.0, 0.0), 2048, 64, 3.0, -25.0) == (1024, 6, 1.0)


def test_branch_cut_wraps_to_column_zero():
    # atan2 = -pi exactly gives u = w, which wraps
    assert project_point((-1.0, -0.0, 0.0), FULL)[0] == 0
    # just either side of the cut: last column and first column
    assert project_point((-1.0, -1e-12, 0.0), FULL)[0] == 2047
    assert project_point((-1.0, 1e-12, 0.0), FULL)[0] == 0


def test_straight_up_is_out_of_view():
    assert project_point((0.0, 0.0, 1.0), FULL) is None


def test_origin_is_out_of_view():
    assert project_point((0.0, 0.0, 0.0), FULL) is None


def test_rows_outside_fov_discarded():
    below = (math.cos(math.radians(-26)), 0.0, math.sin(math.radians(-26)))
    above = (math.cos(math.radians(4)), 0.0, math.sin(math.radians(4)))
    assert project_point(below, FULL) is None
    assert project_point(above, FULL) is None
    bottom = (math.cos(math.radians(-24.99)), 0.0, math.sin(math.radians(-24.99)))
    assert project_point(bottom, FULL)[1] == 63


def test_matches_trig_oracle(rng):
    pts = rng.normal(size=(3000, 3)) * [20, 20, 3]
    v, u, r = project_points(pts, SMALL)
    for i, p in enumerate(pts):
        ref = pixel_of(p, 256, 64, 3.0, -25.0)
        if ref is None:
            assert v[i] == -1
        else:
            assert (u[i], v[i]) == ref[:2]
            assert r[i] == pytest.approx(ref[2], rel=1e-12)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_pixel_indices_in_bounds(x, y, z):
    v, u, _ = project_points(np.array([[x, y, z]]), SMALL)
    if v[0] >= 0:
        assert 0 <= u[0] < 256 and 0 <= v[0] < 64


def test_empty_cloud_all_invalid():
    img = build_range_image(PointCloud(np.zeros((0, 3)), np.zeros(0)), SMALL)
    assert not img.valid_mask.any()
    assert np.all(img.channels == FILL_VALUE)
    assert np.all(img.index_map == EMPTY)


def test_collision_keeps_nearer_point():
    d = np.array([1.0, 0.2, -0.05])
    d /= np.linalg.norm(d)
    cloud = PointCloud(np.stack([5 * d, 3 * d]), np.array([0.1, 0.9]))
    img = build_range_image(cloud, SMALL)
    v, u, _ = project_points(cloud.points, SMALL)
    assert (v[0], u[0]) == (v[1], u[1])
    assert img.index_map[v[0], u[0]] == 1
    assert img.range[v[0], u[0]] == pytest.approx(3.0)
    # the losing 5 m point takes the winner's features
    feats = back_project(img.channels, img)
    np.testing.assert_array_equal(feats[0], feats[1])
    assert feats[0, 3] == pytest.approx(3.0)


def test_equal_range_tie_goes_to_lower_index():
    p = np.array([[4.0, 0.5, 0.0], [4.0, 0.5, 0.0]])
    img = build_range_image(PointCloud(p, np.array([0.2, 0.7])), SMALL)
    v, u, _ = project_points(p, SMALL)
    assert img.index_map[v[0], u[0]] == 0


def test_round_trip_10k(rng):
    pts = random_in_fov(rng, 10_000)
    inten = rng.random(10_000)
    img = build_range_image(PointCloud(pts, inten), SMALL)
    valid = img.valid_mask
    idx = img.index_map[valid]
    r = np.linalg.norm(pts, axis=1)
    np.testing.assert_array_equal(img.channels[valid][:, :3], pts[idx])
    np.testing.assert_array_equal(img.channels[valid][:, 3], r[idx])
    np.testing.assert_array_equal(img.channels[valid][:, 4], inten[idx])
    # every winner really projects to its pixel and is the nearest there
    vv, uu = np.nonzero(valid)
    for v, u, i in zip(vv[:500], uu[:500], idx[:500]):
        assert pixel_of(pts[i], 256, 64, 3.0, -25.0)[:2] == (u, v)


def test_order_independence(rng):
    pts = random_in_fov(rng, 4000)
    inten = rng.random(4000)
    a = build_range_image(PointCloud(pts, inten), SMALL)
    perm = rng.permutation(4000)
    b = build_range_image(PointCloud(pts[perm], inten[perm]), SMALL)
    np.testing.assert_array_equal(a.channels, b.channels)
    np.testing.assert_array_equal(perm[b.index_map[b.valid_mask]], a.index_map[a.valid_mask])


def test_duplicates_resolve_to_lower_index(rng):
    pts = random_in_fov(rng, 4000)
    pts[1000:1100] = pts[:100]
    img = build_range_image(PointCloud(pts, rng.random(4000)), SMALL)
    won = img.index_map[img.valid_mask]
    assert not np.any((won >= 1000) & (won < 1100))


def test_invariant_range_matches_xyz(rng):
    img = build_range_image(PointCloud(random_in_fov(rng, 2000), rng.random(2000)), SMALL)
    c = img.channels[img.valid_mask]
    np.testing.assert_allclose(np.linalg.norm(c[:, :3], axis=1), c[:, 3], rtol=1e-5)
    assert np.all(c[:, 3] > 0)


def test_back_project_constant_and_out_of_view(rng):
    pts = np.vstack([random_in_fov(rng, 500), [[0, 0, 5.0]]])
    img = build_range_image(PointCloud(pts, np.zeros(501)), SMALL)
    feats = back_project(np.full((64, 256, 2), 7.0), img)
    np.testing.assert_array_equal(feats[:500], 7.0)
    np.testing.assert_array_equal(feats[500], 0.0)


def test_back_project_bijective_gives_own_range():
    # one point per pixel centre
    v, u = np.meshgrid(np.arange(0, 64, 3), np.arange(0, 256, 5), indexing="ij")
    el = SMALL.fov_up - (v.ravel() + 0.5) / 64 * SMALL.fov
    az = math.pi * (1 - 2 * (u.ravel() + 0.5) / 256)
    r = np.linspace(2, 50, el.size)
    pts = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], 1)
    img = build_range_image(PointCloud(pts, np.zeros(len(pts))), SMALL)
    got = back_project(img.range, img)[:, 0]
    np.testing.assert_allclose(got, r, rtol=1e-12)


def test_project_ranges_agrees_with_range_image(rng):
    pts = random_in_fov(rng, 3000)
    img = build_range_image(PointCloud(pts, np.zeros(3000)), SMALL)
    np.testing.assert_array_equal(project_ranges(pts, SMALL), img.range)


def test_pixel_labels_and_preview(tmp_path, rng):
    pts = random_in_fov(rng, 800)
    labels = rng.integers(1, 3, 800)
    img = build_range_image(PointCloud(pts, np.zeros(800)), SMALL)
    pl = pixel_labels(img, labels)
    assert np.all(pl[~img.valid_mask] == 0)
    np.testing.assert_array_equal(pl[img.valid_mask], labels[img.index_map[img.valid_mask]])
    save_preview(tmp_path / "a.png", img, labels)
    save_preview(tmp_path / "b.png", img, pl)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_config_validation():
    with pytest.raises(ValueError):
        ProjectionConfig(0, 10)
    with pytest.raises(ValueError):
        ProjectionConfig.from_degrees(64, 256, 0.0, 0.0)
