"""Pose-compensated residual images between the current scan and its predecessors."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .lidar_io import PointCloud, Pose, ScanSequence
from .projection import ProjectionConfig, RangeImage, Scratch, build_range_image, nearest_ranges

DEFAULT_N_RES = 8


@dataclass
class ResidualStack:
    residuals: np.ndarray  # (n_res, h, w) float32
    frame_id: int
    source_offsets: tuple

    def __post_init__(self):
        if len(self.source_offsets) != len(self.residuals):
            raise ValueError("one residual channel per source offset")


def relative_pose(pose_prev: Pose, pose_cur: Pose) -> Pose:
    return pose_cur.inverse().compose(pose_prev)


def transform_scan(previous: PointCloud, pose_prev: Pose, pose_cur: Pose) -> PointCloud:
    """Express ``previous`` in the sensor frame of the current scan."""
    rel = relative_pose(pose_prev, pose_cur)
    return PointCloud(rel.apply(previous.points), previous.intensity, previous.frame_id)


def compute_residual(current_range: np.ndarray, transformed_range: np.ndarray) -> np.ndarray:
    """Normalized absolute range difference on pixels valid in both images, 0 elsewhere.

    Accepts either RangeImage objects or bare (h, w) range arrays (empty = -1).
    """
    cur = current_range.range if isinstance(current_range, RangeImage) else np.asarray(current_range)
    prev = transformed_range.range if isinstance(transformed_range, RangeImage) else np.asarray(transformed_range)
    if cur.shape != prev.shape:
        raise ValueError(f"range images differ in shape: {cur.shape} vs {prev.shape}")
    out = np.abs(cur - prev)
    with np.errstate(divide="ignore", invalid="ignore"):
        out /= cur
    out[(cur <= 0) | (prev <= 0)] = 0.0
    return out


def build_residual_stack(seq: ScanSequence, l: int, n_res: int, config: ProjectionConfig,
                         current: Optional[RangeImage] = None) -> ResidualStack:
    """Residual j (1-based) compares frame ``l`` with frame ``l - j``; missing history is zero."""
    if n_res < 1:
        raise ValueError("n_res must be >= 1")
    frame = seq[l]
    if current is None:
        current = build_range_image(frame.cloud, config)
    out = np.zeros((n_res, config.height, config.width), dtype=np.float32)
    scratch = Scratch(max((len(seq[k].cloud.points) for k in range(max(l - n_res, 0), l)), default=0))
    # same arithmetic as compute_residual without its masks: an invalid current
    # pixel divides by inf (giving 0), an empty reprojected one gives inf or nan
    cur = current.range.ravel()
    denom = np.where(cur > 0, cur, np.inf)
    diff = np.empty_like(denom)
    bad = np.empty(denom.shape, dtype=bool)
    for j in range(1, n_res + 1):
        k = l - j
        if k < 0:
            continue
        prev = seq[k]
        ranges = nearest_ranges(prev.cloud.points, config, relative_pose(prev.pose, frame.pose), scratch)
        np.subtract(cur, ranges, out=diff)
        np.abs(diff, out=diff)
        with np.errstate(invalid="ignore"):
            diff /= denom
        np.isfinite(diff, out=bad)
        np.logical_not(bad, out=bad)
        np.putmask(diff, bad, 0.0)
        np.copyto(out[j - 1].reshape(-1), diff, casting="same_kind")
    return ResidualStack(out, frame.cloud.frame_id, tuple(range(1, n_res + 1)))


class ResidualCache:
    """On-disk cache of residual channels.

    One ``.npy`` file per (sequence, frame, offset) at
    ``<root>/<sequence>/<frame:06d>_<offset:02d>.npy`` holding a little-endian
    float32 (h, w) array.
    """

    def __init__(self, root):
        self.root = Path(root)

    def path(self, sequence: str, frame: int, offset: int) -> Path:
        return self.root / sequence / f"{frame:06d}_{offset:02d}.npy"

    def get(self, sequence: str, frame: int, offsets) -> Optional[np.ndarray]:
        paths = [self.path(sequence, frame, k) for k in offsets]
        if not all(p.exists() for p in paths):
            return None
        return np.stack([np.load(p) for p in paths])

    def put(self, sequence: str, stack: ResidualStack) -> None:
        for k, res in zip(stack.source_offsets, stack.residuals):
            p = self.path(sequence, stack.frame_id, k)
            p.parent.mkdir(parents=True, exist_ok=True)
            np.save(p, res.astype("<f4"))

    def stack(self, seq: ScanSequence, l: int, n_res: int, config: ProjectionConfig,
              current: Optional[RangeImage] = None) -> ResidualStack:
        fid = seq[l].cloud.frame_id
        offsets = tuple(range(1, n_res + 1))
        cached = self.get(seq.sequence_id, fid, offsets)
        if cached is not None and cached.shape[1:] == (config.height, config.width):
            return ResidualStack(cached, fid, offsets)
        st = build_residual_stack(seq, l, n_res, config, current)
        self.put(seq.sequence_id, st)
        return st
