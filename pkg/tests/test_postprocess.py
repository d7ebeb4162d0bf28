import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lidarmos.lidar_io import PointCloud
from lidarmos.postprocess import knn_refine
from lidarmos.projection import ProjectionConfig, build_range_image, pixel_labels

from oracles import knn_vote_loop

CFG = ProjectionConfig.from_degrees(16, 32, 3.0, -25.0)


def centre_points(vs, us, r):
    vs, us, r = np.asarray(vs, float), np.asarray(us, float), np.broadcast_to(np.asarray(r, float), np.shape(vs))
    el = CFG.fov_up - (vs + 0.5) / CFG.height * CFG.fov
    az = math.pi * (1 - 2 * (us + 0.5) / CFG.width)
    return np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], 1)


def window_scene(centre_label=2, ranges=None):
    vv, uu = np.meshgrid(np.arange(6, 11), np.arange(10, 15), indexing="ij")
    vv, uu = vv.ravel(), uu.ravel()
    r = np.full(25, 10.0) if ranges is None else ranges
    pts = centre_points(vv, uu, r)
    img = build_range_image(PointCloud(pts, np.zeros(25)), CFG)
    lab = np.ones((16, 32), np.int64)
    lab[8, 12] = centre_label
    return pts, img, lab


def test_uniform_window_unchanged():
    pts, img, lab = window_scene(centre_label=1)
    assert np.all(knn_refine(pts, lab, img) == 1)


def test_isolated_wrong_pixel_flipped():
    pts, img, lab = window_scene()
    centre = 12
    assert img.proj_v[centre] == 8 and img.proj_u[centre] == 12
    out = knn_refine(pts, lab, img, k=5)
    assert out[centre] == 1
    assert np.all(out == 1)


def test_far_point_keeps_own_label():
    ranges = np.full(25, 10.0)
    ranges[12] = 30.0
    pts, img, lab = window_scene(ranges=ranges)
    out = knn_refine(pts, lab, img, k=5, cutoff=1.0)
    # the centre votes only for itself
    assert out[12] == 2


def test_nothing_within_cutoff_falls_back():
    pts, img, lab = window_scene()
    # every pixel in reach is now 40 m off the points' own range
    img.channels[img.valid_mask, 3] = 50.0
    out = knn_refine(pts, lab, img, k=5, cutoff=0.5)
    assert out[12] == 2
    assert np.all(np.delete(out, 12) == 1)


def test_k1_equals_back_projection(rng):
    pts = rng.normal(size=(600, 3)) * [15, 15, 1]
    img = build_range_image(PointCloud(pts, np.zeros(600)), CFG)
    lab = rng.integers(1, 3, (16, 32))
    winners = img.index_map[img.valid_mask]
    out = knn_refine(pts, lab, img, k=1, cutoff=0.0)
    inview = img.proj_v >= 0
    np.testing.assert_array_equal(out[winners], lab[img.proj_v[winners], img.proj_u[winners]])
    np.testing.assert_array_equal(out[inview], lab[img.proj_v[inview], img.proj_u[inview]])
    assert np.all(out[~inview] == 1)


def test_out_of_view_points_static():
    pts = np.array([[0.0, 0.0, 5.0], [10.0, 0.0, 0.0]])
    img = build_range_image(PointCloud(pts, np.zeros(2)), CFG)
    out = knn_refine(pts, np.full((16, 32), 2), img)
    assert out.tolist() == [1, 2]


@pytest.mark.parametrize("k,window", [(0, 5), (26, 5), (3, 4), (1, 0)])
def test_bad_parameters(k, window):
    pts, img, lab = window_scene()
    with pytest.raises(ValueError):
        knn_refine(pts, lab, img, k=k, window=window)


def random_scene(seed, n=400):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(n, 3)) * [12, 12, 1.5]
    img = build_range_image(PointCloud(pts, np.zeros(n)), CFG)
    lab = r.integers(1, 3, (16, 32))
    return r, pts, img, lab


@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(1, 1), (3, 3), (5, 5), (9, 3), (7, 7)]),
       st.floats(0.2, 3.0), st.floats(0.0, 5.0))
def test_matches_loop_oracle(seed, kw, sigma, cutoff):
    k, window = kw
    k = min(k, window * window)
    _, pts, img, lab = random_scene(seed)
    got = knn_refine(pts, lab, img, k=k, window=window, sigma=sigma, cutoff=cutoff)
    ref = knn_vote_loop(pts, lab, img.range, img.proj_v, img.proj_u, k, window, sigma, cutoff)
    np.testing.assert_array_equal(got, ref)


@given(st.integers(0, 2 ** 32 - 1))
def test_no_label_invention(seed):
    r, pts, img, lab = random_scene(seed)
    lab = r.integers(1, 3, (16, 32)) * 3  # labels 3 and 6 only
    out = knn_refine(pts, lab, img, k=5, window=3, cutoff=2.0)
    for i in np.flatnonzero(img.proj_v >= 0):
        v, u = img.proj_v[i], img.proj_u[i]
        rows = [x for x in range(v - 1, v + 2) if 0 <= x < 16]
        cols = [(u + d) % 32 for d in (-1, 0, 1)]
        assert out[i] in set(lab[np.ix_(rows, cols)].ravel())


def test_pixel_labels_route(rng):
    # per-point predictions scattered to pixels refine into the MOS label set
    _, pts, img, _ = random_scene(3)
    per_point = rng.integers(1, 3, len(pts))
    pl = pixel_labels(img, per_point)
    out = knn_refine(pts, pl, img)
    assert set(np.unique(out)) <= {0, 1, 2}
