"""Spherical projection of point clouds into multi-channel range images."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .lidar_io import MosLabel, PointCloud

EMPTY = -1
FILL_VALUE = -1.0
CHANNELS = ("x", "y", "z", "range", "intensity")


@dataclass(frozen=True)
class ProjectionConfig:
    height: int = 64
    width: int = 2048
    fov_up: float = math.radians(3.0)
    fov_down: float = math.radians(-25.0)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image dimensions must be positive")
        if self.fov <= 0:
            raise ValueError("vertical field of view must be positive")

    @property
    def fov(self) -> float:
        return self.fov_up + abs(self.fov_down)

    @classmethod
    def from_degrees(cls, height=64, width=2048, fov_up=3.0, fov_down=-25.0) -> "ProjectionConfig":
        return cls(int(height), int(width), math.radians(fov_up), math.radians(fov_down))


@dataclass
class RangeImage:
    """(h, w, 5) channels ordered x, y, z, range, intensity; empty pixels hold -1."""

    channels: np.ndarray
    index_map: np.ndarray
    # per-point pixel coordinates; -1 for points outside the vertical FOV
    proj_v: np.ndarray
    proj_u: np.ndarray

    @property
    def valid_mask(self) -> np.ndarray:
        return self.index_map != EMPTY

    @property
    def range(self) -> np.ndarray:
        return self.channels[..., 3]

    @property
    def shape(self) -> tuple:
        return self.index_map.shape

    @property
    def n_points(self) -> int:
        return len(self.proj_v)


class Scratch:
    """Reusable per-point work arrays; repeated projections skip fresh allocations."""

    def __init__(self, n: int):
        self.n = n
        # separate arrays, so returned views pin only what they use
        self.f = [np.empty(n) for _ in range(7)]
        self.i = [np.empty(n, dtype=np.int64) for _ in range(2)]
        self.b = [np.empty(n, dtype=bool) for _ in range(2)]

    @classmethod
    def fit(cls, n: int, scratch: Optional["Scratch"] = None) -> "Scratch":
        return scratch if scratch is not None and scratch.n >= n else cls(n)


def _spherical(x, y, z, config: ProjectionConfig, scratch: Optional[Scratch] = None):
    # results are views into the scratch arrays
    n = len(x)
    s = Scratch.fit(n, scratch)
    rho2, r, fu, fv = (a[:n] for a in s.f[3:])
    v, u = (a[:n] for a in s.i)
    b0, b1 = (a[:n] for a in s.b)
    w, h = config.width, config.height
    np.multiply(x, x, out=rho2)
    rho2 += np.multiply(y, y, out=fu)
    np.multiply(z, z, out=r)
    r += rho2
    np.sqrt(r, out=r)
    # u = w/2 * (1 - yaw/pi), v = h * (1 - (pitch + |f_down|) / f)
    np.arctan2(y, x, out=fu)
    fu *= -0.5 * w / np.pi
    fu += 0.5 * w
    np.copyto(u, np.floor(fu, out=fu), casting="unsafe")
    np.putmask(u, np.equal(u, w, out=b0), 0)
    # atan2 form of asin(z / r); cheaper and defined at r = 0
    np.arctan2(z, np.sqrt(rho2, out=rho2), out=fv)
    fv *= -h / config.fov
    fv += h * (1.0 - abs(config.fov_down) / config.fov)
    np.copyto(v, np.floor(fv, out=fv), casting="unsafe")
    np.greater(r, 0, out=b1)
    b1 &= np.greater_equal(v, 0, out=b0)
    b1 &= np.less(v, h, out=b0)
    np.logical_not(b1, out=b1)
    np.putmask(v, b1, -1)
    np.putmask(u, b1, -1)
    return v, u, r


def project_points(points: np.ndarray, config: ProjectionConfig):
    """Vectorized spherical mapping.

    Returns integer ``(v, u)`` per point plus the ranges; points outside the
    vertical FOV or at the origin get ``v = u = -1``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3).T
    return _spherical(pts[0], pts[1], pts[2], config)


def project_point(p, config: ProjectionConfig) -> Optional[tuple]:
    """Pixel ``(u, v, r)`` of a single point, or ``None`` if out of view."""
    v, u, r = project_points(np.asarray(p, dtype=np.float64)[None], config)
    if v[0] < 0:
        return None
    return int(u[0]), int(v[0]), float(r[0])


def _winners(pix: np.ndarray, r: np.ndarray, n_pix: int) -> np.ndarray:
    """Index of the nearest point per pixel (ties to the lower index), -1 if none."""
    best_r = np.full(n_pix, np.inf)
    np.minimum.at(best_r, pix, r)
    idx = np.arange(len(pix))
    on_min = r == best_r[pix]
    win = np.full(n_pix, np.iinfo(np.int64).max)
    np.minimum.at(win, pix[on_min], idx[on_min])
    win[win == np.iinfo(np.int64).max] = EMPTY
    return win


def build_range_image(cloud: PointCloud, config: ProjectionConfig) -> RangeImage:
    v, u, r = project_points(cloud.points, config)
    n_pix = config.height * config.width
    pix = v * config.width + u
    pix[v < 0] = n_pix
    index_map = _winners(pix, r, n_pix + 1)[:n_pix]

    # gather from a per-point table whose last row is the empty-pixel fill
    table = np.empty((len(r) + 1, 5))
    table[:-1, :3] = cloud.points
    table[:-1, 3] = r
    table[:-1, 4] = cloud.intensity
    table[-1] = FILL_VALUE
    channels = table[index_map]
    h, w = config.height, config.width
    return RangeImage(channels.reshape(h, w, 5), index_map.reshape(h, w), v, u)


def nearest_ranges(points: np.ndarray, config: ProjectionConfig, pose=None,
                   scratch: Optional[Scratch] = None) -> np.ndarray:
    """Flat (h * w) minimum range per pixel, ``inf`` where no point lands."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    scratch = Scratch.fit(n, scratch)
    if pose is not None:
        xyz = [a[:n] for a in scratch.f[:3]]
        for k in range(3):
            np.matmul(pts, pose.rotation[k], out=xyz[k])
            xyz[k] += pose.translation[k]
    else:
        xyz = pts.T
    v, u, r = _spherical(xyz[0], xyz[1], xyz[2], config, scratch)
    n_pix = config.height * config.width
    # out-of-view points land in a spare bin past the image
    off = np.less(v, 0, out=scratch.b[0][:n])
    pix = v
    pix *= config.width
    pix += u
    np.putmask(pix, off, n_pix)
    best = np.full(n_pix + 1, np.inf)
    np.minimum.at(best, pix, r)
    return best[:n_pix]


def project_ranges(points: np.ndarray, config: ProjectionConfig, pose=None,
                   scratch: Optional[Scratch] = None) -> np.ndarray:
    """Range channel only (h, w), empty pixels -1; same collision rule as build_range_image.

    ``pose``, when given, is applied to the points first.
    """
    best = nearest_ranges(points, config, pose, scratch)
    best[best == np.inf] = FILL_VALUE
    return best.reshape(config.height, config.width)


def back_project(image_features: np.ndarray, image: RangeImage) -> np.ndarray:
    """Per-point features gathered from each point's pixel; out-of-view points get zeros.

    ``image_features`` is (h, w, C). Points that lost a pixel collision receive
    the winner's features.
    """
    feats = np.asarray(image_features)
    if feats.ndim == 2:
        feats = feats[..., None]
    h, w = image.shape
    assert feats.shape[:2] == (h, w), "feature image does not match the index map"
    out = np.zeros((image.n_points, feats.shape[2]), dtype=feats.dtype)
    inview = image.proj_v >= 0
    assert np.all(image.proj_u[inview] < w) and np.all(image.proj_v[inview] < h)
    out[inview] = feats[image.proj_v[inview], image.proj_u[inview]]
    return out


def pixel_labels(image: RangeImage, point_labels: np.ndarray, empty_label: int = 0) -> np.ndarray:
    """Label of each pixel's winning point; ``empty_label`` where no point landed."""
    out = np.full(image.shape, empty_label, dtype=np.int64)
    valid = image.valid_mask
    out[valid] = np.asarray(point_labels)[image.index_map[valid]]
    return out


def save_preview(path, image: RangeImage, labels: Optional[np.ndarray] = None, max_range: float = 80.0) -> None:
    """8-bit PNG of the range channel; moving pixels tinted red.

    ``labels`` may be per pixel (h, w) or per point (N,).
    """
    rng = image.range
    gray = np.where(image.valid_mask, 255.0 * (1.0 - np.clip(rng / max_range, 0.0, 1.0)), 0.0)
    gray = gray.astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != image.shape:
            labels = pixel_labels(image, labels)
        rgb[labels == MosLabel.MOVING] = (255, 0, 0)
    Image.fromarray(rgb).save(Path(path))
