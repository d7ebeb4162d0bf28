import numpy as np
import pytest

from lidarmos.lidar_io import MosLabel
from lidarmos.synthetic import (Box, DegenerateSceneError, SyntheticConfig, generate_synthetic_sequence,
                                surface_distance, toy_config)


def wall_scene(**kw):
    base = dict(n_frames=2, n_beams=16, n_azimuth=64, ground=False,
                boxes=[dict(center=(10.0, 0.0, 0.0), size=(0.5, 40.0, 20.0))])
    base.update(kw)
    return SyntheticConfig.from_dict(base)


def test_static_wall_all_static():
    seq = generate_synthetic_sequence(wall_scene())
    for f in seq.frames:
        assert len(f.cloud) > 0
        assert np.all(f.labels.labels == MosLabel.STATIC)


def test_approaching_box_is_moving():
    cfg = wall_scene(boxes=[dict(center=(10.0, 0.0, 0.0), size=(1.0, 4.0, 4.0), velocity=(-1.0, 0.0, 0.0))])
    seq = generate_synthetic_sequence(cfg)
    for f in seq.frames:
        assert f.labels.n_moving == len(f.cloud) > 0


def test_sensor_motion_does_not_make_static_world_move():
    seq = generate_synthetic_sequence(toy_config(n_frames=3, boxes=toy_config().to_dict()["boxes"][:4]))
    assert all(f.labels.n_moving == 0 for f in seq.frames)


def test_points_lie_on_surfaces():
    cfg = toy_config(n_frames=4)
    seq = generate_synthetic_sequence(cfg)
    for t, f in enumerate(seq.frames):
        world = f.pose.apply(f.cloud.points)
        assert surface_distance(cfg, t, world).max() < 1e-9


def test_labels_match_mover_membership():
    cfg = toy_config(n_frames=3)
    seq = generate_synthetic_sequence(cfg)
    mover = cfg.boxes[4]
    for t, f in enumerate(seq.frames):
        world = f.pose.apply(f.cloud.points)
        lo, hi = mover.bounds(t)
        on_mover = np.all((world >= lo - 1e-9) & (world <= hi + 1e-9), axis=1)
        np.testing.assert_array_equal(on_mover, f.labels.labels == MosLabel.MOVING)


def test_degenerate_scene():
    with pytest.raises(DegenerateSceneError):
        generate_synthetic_sequence(SyntheticConfig(ground=False))


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(n_frames=1)


def test_config_round_trip():
    cfg = toy_config()
    again = SyntheticConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert isinstance(again.boxes[0], Box)
