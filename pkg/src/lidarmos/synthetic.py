"""Ray-cast synthetic LiDAR sequences with exact poses and MOS labels.

Scenes are a ground plane (z = 0 in the world frame) plus axis-aligned boxes.
Boxes with a nonzero velocity are movers; every point that hits one is labeled
moving. Rays are laid out on a regular beam x azimuth lattice whose centers
follow the spherical projection convention, so a lattice matching the range
image puts exactly one ray through each pixel center.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .lidar_io import Frame, MosLabel, MosLabels, PointCloud, Pose, ScanSequence


class DegenerateSceneError(ValueError):
    pass


@dataclass
class Box:
    center: tuple
    size: tuple
    velocity: tuple = (0.0, 0.0, 0.0)
    intensity: float = 0.5

    def __post_init__(self):
        self.center, self.size, self.velocity = (tuple(float(x) for x in a) for a in (self.center, self.size, self.velocity))

    def bounds(self, t: float) -> tuple:
        c = np.asarray(self.center, float) + t * np.asarray(self.velocity, float)
        half = 0.5 * np.asarray(self.size, float)
        return c - half, c + half

    @property
    def moving(self) -> bool:
        return bool(np.any(np.asarray(self.velocity, float) != 0.0))


@dataclass
class SyntheticConfig:
    n_frames: int = 20
    n_beams: int = 64
    n_azimuth: int = 256
    fov_up_deg: float = 3.0
    fov_down_deg: float = -25.0
    max_range: float = 80.0
    # sensor trajectory, per frame
    sensor_start: tuple = (0.0, 0.0, 1.73)
    sensor_velocity: tuple = (0.0, 0.0, 0.0)
    sensor_yaw0: float = 0.0
    sensor_yaw_rate: float = 0.0
    ground: bool = True
    ground_intensity: float = 0.3
    boxes: list = field(default_factory=list)
    sequence_id: str = "00"

    def __post_init__(self):
        self.boxes = [b if isinstance(b, Box) else Box(**b) for b in self.boxes]
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.n_beams < 1 or self.n_azimuth < 1:
            raise ValueError("ray lattice must be non-empty")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for key in ("sensor_start", "sensor_velocity"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SyntheticConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self) -> dict:
        def plain(x):
            if isinstance(x, (tuple, list)):
                return [plain(y) for y in x]
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            return x
        return plain(asdict(self))

    def sensor_pose(self, t: int) -> Pose:
        pos = np.asarray(self.sensor_start, float) + t * np.asarray(self.sensor_velocity, float)
        return Pose.from_yaw(self.sensor_yaw0 + t * self.sensor_yaw_rate, pos)


def lattice_directions(n_beams: int, n_azimuth: int, fov_up: float, fov_down: float) -> np.ndarray:
    """Unit ray directions (n_beams * n_azimuth, 3) in the sensor frame, row-major."""
    fov = fov_up + abs(fov_down)
    elev = fov_up - (np.arange(n_beams) + 0.5) / n_beams * fov
    azim = np.pi * (1.0 - 2.0 * (np.arange(n_azimuth) + 0.5) / n_azimuth)
    el, az = np.meshgrid(elev, azim, indexing="ij")
    d = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return d.reshape(-1, 3)


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Entry distance of each ray into the box, inf on miss or when starting inside."""
    tmin = np.full(len(dirs), -np.inf)
    tmax = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            d = dirs[:, a]
            flat = d == 0.0
            t1 = (lo[a] - origin[a]) / d
            t2 = (hi[a] - origin[a]) / d
            near = np.where(flat, -np.inf, np.minimum(t1, t2))
            far = np.where(flat, np.inf, np.maximum(t1, t2))
            if lo[a] > origin[a] or origin[a] > hi[a]:
                far = np.where(flat, -np.inf, far)
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
    hit = (tmax >= tmin) & (tmin > 0.0)
    return np.where(hit, tmin, np.inf)


def cast_scan(cfg: SyntheticConfig, t: int):
    """Cast one scan at time step ``t``.

    Returns ``(points_sensor, intensity, object_id, pose)`` where object_id is
    -1 for the ground and the box index otherwise.
    """
    pose = cfg.sensor_pose(t)
    d_sensor = lattice_directions(cfg.n_beams, cfg.n_azimuth,
                                  np.deg2rad(cfg.fov_up_deg), np.deg2rad(cfg.fov_down_deg))
    d_world = d_sensor @ pose.rotation.T
    origin = pose.translation

    best = np.full(len(d_sensor), np.inf)
    obj = np.full(len(d_sensor), -2, dtype=np.int64)
    if cfg.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(d_world[:, 2] < 0.0, -origin[2] / d_world[:, 2], np.inf)
        tg = np.where(tg > 0.0, tg, np.inf)
        closer = tg < best
        best[closer], obj[closer] = tg[closer], -1
    for i, box in enumerate(cfg.boxes):
        lo, hi = box.bounds(t)
        tb = _ray_box(origin, d_world, lo, hi)
        closer = tb < best
        best[closer], obj[closer] = tb[closer], i

    keep = best <= cfg.max_range
    pts = d_sensor[keep] * best[keep, None]
    obj = obj[keep]
    lut = np.array([cfg.ground_intensity] + [b.intensity for b in cfg.boxes])
    inten = np.clip(lut[obj + 1], 0.0, 1.0)
    return pts, inten, obj, pose


def generate_synthetic_sequence(cfg: SyntheticConfig) -> ScanSequence:
    if not cfg.ground and not cfg.boxes:
        raise DegenerateSceneError("scene has no geometry")
    moving = np.array([False] + [b.moving for b in cfg.boxes])
    frames = []
    for t in range(cfg.n_frames):
        pts, inten, obj, pose = cast_scan(cfg, t)
        labels = np.where(moving[obj + 1], MosLabel.MOVING, MosLabel.STATIC)
        frames.append(Frame(PointCloud(pts, inten, t), pose, MosLabels(labels, t)))
    if all(len(f.cloud) == 0 for f in frames):
        raise DegenerateSceneError("no ray hit any surface")
    return ScanSequence(tuple(frames), cfg.sequence_id)


def surface_distance(cfg: SyntheticConfig, t: int, world_points: np.ndarray) -> np.ndarray:
    """Distance from each world point to the nearest surface of the scene at time t."""
    dist = np.full(len(world_points), np.inf)
    if cfg.ground:
        dist = np.minimum(dist, np.abs(world_points[:, 2]))
    for box in cfg.boxes:
        lo, hi = box.bounds(t)
        # distance to box boundary, exact for points on or outside the surface
        outside = np.linalg.norm(np.maximum(np.maximum(lo - world_points, world_points - hi), 0.0), axis=1)
        inside = np.min(np.minimum(world_points - lo, hi - world_points), axis=1)
        dist = np.minimum(dist, np.where(outside > 0, outside, np.abs(inside)))
    return dist


def toy_config(**overrides) -> SyntheticConfig:
    """A small street-like scene: two static walls, parked boxes, one approaching car."""
    base = dict(
        n_frames=20,
        n_beams=64,
        n_azimuth=256,
        sensor_velocity=(0.3, 0.0, 0.0),
        boxes=[
            dict(center=(0.0, 9.0, 2.0), size=(60.0, 0.5, 4.0), intensity=0.6),
            dict(center=(0.0, -9.0, 2.0), size=(60.0, 0.5, 4.0), intensity=0.6),
            dict(center=(-12.0, 4.0, 0.8), size=(4.0, 1.8, 1.6), intensity=0.8),
            dict(center=(14.0, -5.5, 0.8), size=(4.0, 1.8, 1.6), intensity=0.8),
            dict(center=(24.0, 2.0, 0.8), size=(4.0, 1.8, 1.5), velocity=(-0.6, 0.0, 0.0), intensity=0.8),
        ],
    )
    base.update(overrides)
    return SyntheticConfig.from_dict(base)
