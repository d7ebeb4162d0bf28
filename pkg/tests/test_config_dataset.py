import numpy as np
import pytest
import torch
import yaml

from lidarmos.config import ConfigError, ExperimentConfig, builtin_config, set_path
from lidarmos.dataset import augment, drop_pixels, flip_horizontal, prepare_frames, rotate_azimuth
from lidarmos.lidar_io import MosLabel
from lidarmos.pipeline import back_project_labels, back_project_tensor, predict_points
from lidarmos.projection import ProjectionConfig, project_points
from lidarmos.residuals import ResidualCache
from lidarmos.synthetic import generate_synthetic_sequence, toy_config

PROJ = ProjectionConfig.from_degrees(32, 128, 3.0, -25.0)


@pytest.fixture(scope="module")
def frame():
    seq = generate_synthetic_sequence(toy_config(n_frames=3, n_beams=32, n_azimuth=128))
    return prepare_frames(seq, PROJ, 2)[2]


def test_builtin_toy_config_loads():
    cfg = ExperimentConfig.load(builtin_config("toy.yaml"))
    assert cfg.network.height == 64 and cfg.network.width == 256
    assert cfg.network.n_res == cfg.n_res == 8
    assert cfg.train.lr == 0.01 and cfg.train.momentum == 0.9 and cfg.train.weight_decay == 1e-4
    assert cfg.synthetic is not None and len(cfg.synthetic.boxes) == 5
    again = ExperimentConfig.from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"network": {"height": 32}},
    {"n_res": 4, "network": {"n_res": 8}},
    {"train": {"static_ratio": 0}},
    {"point_head": {"nope": 1}},
    {"data": {"train": ["00"], "extra": 1}},
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_set_path():
    d = {"train": {"lr": 0.01}}
    set_path(d, "train.lr", "0.02")
    set_path(d, "data.train", "['03', '04']")
    assert d == {"train": {"lr": 0.02}, "data": {"train": ["03", "04"]}}
    with pytest.raises(ConfigError):
        set_path({"output": "x"}, "output.dir", "y")


def test_rotation_keeps_pixels_consistent(frame):
    img, res, lab = rotate_azimuth(frame.image, frame.residuals, frame.pixel_labels, 17)
    valid = img[3] > 0
    assert valid.sum() == (frame.image[3] > 0).sum()
    vv, uu = np.nonzero(valid)
    v, u, _ = project_points(img[:3, vv, uu].T.astype(np.float64), PROJ)
    assert np.mean(u == uu) > 0.99 and np.mean(v == vv) > 0.99
    np.testing.assert_array_equal(res, np.roll(frame.residuals, 17, -1))
    np.testing.assert_array_equal(lab, np.roll(frame.pixel_labels, 17, -1))
    # ranges and intensities move with their pixels untouched
    np.testing.assert_array_equal(img[3:], np.roll(frame.image[3:], 17, -1))


def test_flip_mirrors_columns(frame):
    img, res, lab = flip_horizontal(frame.image, frame.residuals, frame.pixel_labels)
    vv, uu = np.nonzero(img[3] > 0)
    _, u, _ = project_points(img[:3, vv, uu].T.astype(np.float64), PROJ)
    assert np.mean(u == uu) > 0.99
    np.testing.assert_array_equal(lab, frame.pixel_labels[:, ::-1])


def test_drop_pixels_marks_unlabeled(frame):
    img, res, lab = drop_pixels(frame.image, frame.residuals, frame.pixel_labels, 0.3, np.random.default_rng(0))
    dropped = (frame.image[3] > 0) & (img[3] <= 0)
    assert 0.2 < dropped.sum() / (frame.image[3] > 0).sum() < 0.4
    assert np.all(lab[dropped] == MosLabel.UNLABELED) and np.all(res[:, dropped] == 0)
    assert np.all(img[:, dropped] == -1)


def test_augment_off_is_identity(frame):
    img, res, lab = augment(frame, np.random.default_rng(0))
    assert img is frame.image and res is frame.residuals and lab is frame.pixel_labels


def test_frame_layout(frame):
    assert frame.image.shape == (5, 32, 128) and frame.image.dtype == np.float32
    assert frame.residuals.shape == (2, 32, 128)
    assert len(frame.point_labels) == len(frame.points)


def test_cached_frames_match_uncached(tmp_path):
    seq = generate_synthetic_sequence(toy_config(n_frames=3, n_beams=32, n_azimuth=128))
    a = prepare_frames(seq, PROJ, 2)
    b = prepare_frames(seq, PROJ, 2, cache=ResidualCache(tmp_path))
    c = prepare_frames(seq, PROJ, 2, cache=ResidualCache(tmp_path))
    for x, y, z in zip(a, b, c):
        np.testing.assert_array_equal(x.residuals, y.residuals)
        np.testing.assert_array_equal(y.residuals, z.residuals)


def test_back_projection_helpers(frame):
    feats = torch.arange(2 * 32 * 128, dtype=torch.float32).view(2, 32, 128)
    pf = back_project_tensor(feats, frame.proj_v, frame.proj_u)
    inview = frame.proj_v >= 0
    np.testing.assert_array_equal(pf[inview, 1].numpy(), feats[1].numpy()[frame.proj_v[inview], frame.proj_u[inview]])
    assert torch.all(pf[~torch.as_tensor(inview)] == 0)
    labels = back_project_labels(frame.pixel_labels, frame)
    winners = frame.range_image.index_map[frame.range_image.valid_mask]
    np.testing.assert_array_equal(labels[winners], frame.point_labels[winners])


def test_predict_points_modes(frame):
    from lidarmos.network import MotionSegNet, NetworkConfig
    torch.manual_seed(0)
    net = MotionSegNet(NetworkConfig(n_res=2, base_channels=4, depth=2, height=32, width=128, meta_hidden=4))
    for head, post in (("image", "none"), ("image", "knn")):
        out = predict_points(net, frame, head, post)
        assert out.shape == (len(frame.points),) and set(np.unique(out)) <= {1, 2}
    with pytest.raises(ValueError):
        predict_points(net, frame, "point")
    with pytest.raises(ValueError):
        predict_points(net, frame, "image", "crf")
