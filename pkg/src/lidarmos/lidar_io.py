"""Readers and writers for KITTI-style LiDAR sequences.

Layout on disk follows the odometry benchmark::

    <root>/sequences/<seq>/velodyne/<frame:06d>.bin
    <root>/sequences/<seq>/labels/<frame:06d>.label
    <root>/sequences/<seq>/poses.txt
    <root>/sequences/<seq>/calib.txt
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

log = logging.getLogger(__name__)


class FormatError(ValueError):
    """Raised when a file does not follow the expected binary/text layout."""


class MosLabel(IntEnum):
    UNLABELED = 0
    STATIC = 1
    MOVING = 2


# raw semantic id -> MOS class; anything not listed maps to STATIC.
# 0 unlabeled, 1 outlier, 251 generic moving, 252-259 the moving-<class> ids
DEFAULT_REMAP = {0: MosLabel.UNLABELED, 1: MosLabel.UNLABELED, 9: MosLabel.STATIC,
                 **{k: MosLabel.MOVING for k in range(251, 260)}}


@dataclass(frozen=True)
class Pose:
    """Rigid transform taking sensor-frame points to the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.asarray(translation, float))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(pts) != len(inten):
            raise ValueError(f"points ({len(pts)}) and intensity ({len(inten)}) differ in length")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)


@dataclass(frozen=True)
class MosLabels:
    labels: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_moving(self) -> int:
        return int(np.count_nonzero(self.labels == MosLabel.MOVING))


@dataclass(frozen=True)
class Frame:
    cloud: PointCloud
    pose: Pose
    labels: Optional[MosLabels] = None


@dataclass(frozen=True)
class ScanSequence:
    frames: tuple
    sequence_id: str = "00"

    def __post_init__(self):
        frames = tuple(self.frames)
        ids = [f.cloud.frame_id for f in frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("frame ids must be strictly increasing")
        for f in frames:
            if f.labels is not None and len(f.labels) != len(f.cloud):
                raise ValueError(f"frame {f.cloud.frame_id}: label count does not match point count")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i) -> Frame:
        return self.frames[i]

    @property
    def poses(self) -> list:
        return [f.pose for f in self.frames]


# --- scans -----------------------------------------------------------------

def read_scan(path, frame_id: int = 0) -> PointCloud:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise FormatError(f"{path}: byte length {len(raw)} is not a multiple of 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.all(np.isfinite(data), axis=1)
    if not finite.all():
        log.warning("%s: dropped %d non-finite points", path, int((~finite).sum()))
        data = data[finite]
    return PointCloud(data[:, :3], np.clip(data[:, 3], 0.0, 1.0), frame_id)


def write_scan(path, cloud: PointCloud) -> None:
    data = np.empty((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.points
    data[:, 3] = cloud.intensity
    Path(path).write_bytes(data.tobytes())


# --- poses and calibration ---------------------------------------------------

def _parse_row(tokens: Sequence[str], where: str) -> np.ndarray:
    if len(tokens) != 12:
        raise FormatError(f"{where}: expected 12 values, got {len(tokens)}")
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError as e:
        raise FormatError(f"{where}: {e}") from None
    T = np.eye(4)
    T[:3, :] = vals.reshape(3, 4)
    return T


def read_calib(path) -> Pose:
    """Return the ``Tr`` (LiDAR -> camera) transform from a KITTI calib.txt."""
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            return Pose.from_matrix(_parse_row(rest.split(), f"{path}:{lineno}"))
    raise FormatError(f"{path}: no 'Tr:' entry")


def write_calib(path, calib: Pose) -> None:
    row = " ".join(f"{v:.12e}" for v in calib.matrix()[:3].reshape(-1))
    Path(path).write_text(f"Tr: {row}\n")


def read_poses(path, calib: Optional[Pose] = None) -> list:
    """Read camera-frame poses and conjugate them into the LiDAR frame."""
    path = Path(path)
    Tr = (calib or Pose.identity()).matrix()
    Tr_inv = np.linalg.inv(Tr)
    poses = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        P = _parse_row(line.split(), f"{path}:{lineno}")
        M = Tr_inv @ P @ Tr
        # re-orthonormalize to absorb the text round-off
        U, _, Vt = np.linalg.svd(M[:3, :3])
        M[:3, :3] = U @ Vt
        poses.append(Pose.from_matrix(M))
    return poses


def write_poses(path, poses: Sequence[Pose], calib: Optional[Pose] = None) -> None:
    Tr = (calib or Pose.identity()).matrix()
    Tr_inv = np.linalg.inv(Tr)
    lines = []
    for p in poses:
        P = Tr @ p.matrix() @ Tr_inv
        lines.append(" ".join(f"{v:.12e}" for v in P[:3].reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


# --- labels ------------------------------------------------------------------

def load_remap(path) -> dict:
    """Load a ``{raw_id: label}`` table from YAML; labels are names or 0/1/2."""
    table = yaml.safe_load(Path(path).read_text()) or {}
    remap = table.get("remap", table)
    out = {}
    for k, v in remap.items():
        try:
            out[int(k)] = MosLabel(v) if isinstance(v, int) else MosLabel[str(v).upper()]
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: bad label {v!r} for id {k}") from e
    return out


def remap_semantic(ids: np.ndarray, remap: Optional[Mapping[int, MosLabel]] = None) -> np.ndarray:
    remap = DEFAULT_REMAP if remap is None else remap
    lut = np.full(1 << 16, MosLabel.STATIC, dtype=np.int64)
    for k, v in remap.items():
        lut[k] = int(v)
    return lut[np.asarray(ids, dtype=np.uint32) & 0xFFFF]


def read_labels(path, frame_id: int = 0, remap=None) -> MosLabels:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: byte length {len(raw)} is not a multiple of 4")
    words = np.frombuffer(raw, dtype="<u4")
    return MosLabels(remap_semantic(words, remap), frame_id)


_MOS_TO_RAW = {MosLabel.UNLABELED: 0, MosLabel.STATIC: 9, MosLabel.MOVING: 251}


def write_labels(path, labels: MosLabels) -> None:
    lut = np.array([_MOS_TO_RAW[MosLabel(i)] for i in range(3)], dtype="<u4")
    Path(path).write_bytes(lut[labels.labels].astype("<u4").tobytes())


# --- sequences -----------------------------------------------------------------

def sequence_dir(root, seq: str) -> Path:
    return Path(root) / "sequences" / seq


def read_sequence(root, seq: str, remap=None, frames: Optional[Sequence[int]] = None) -> ScanSequence:
    d = sequence_dir(root, seq)
    if not d.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {d}")
    calib = read_calib(d / "calib.txt") if (d / "calib.txt").exists() else Pose.identity()
    poses = read_poses(d / "poses.txt", calib)
    scans = sorted((d / "velodyne").glob("*.bin"))
    if len(scans) != len(poses):
        raise FormatError(f"{d}: {len(scans)} scans but {len(poses)} poses")
    wanted = range(len(scans)) if frames is None else frames
    out = []
    for i in wanted:
        fid = int(scans[i].stem)
        cloud = read_scan(scans[i], fid)
        lab_path = d / "labels" / f"{scans[i].stem}.label"
        labels = read_labels(lab_path, fid, remap) if lab_path.exists() else None
        if labels is not None and len(labels) != len(cloud):
            raise FormatError(f"{lab_path}: {len(labels)} labels for {len(cloud)} points")
        out.append(Frame(cloud, poses[i], labels))
    return ScanSequence(tuple(out), seq)


def write_sequence(root, seq: ScanSequence, calib: Optional[Pose] = None) -> Path:
    d = sequence_dir(root, seq.sequence_id)
    (d / "velodyne").mkdir(parents=True, exist_ok=True)
    (d / "labels").mkdir(exist_ok=True)
    calib = calib or Pose.identity()
    write_calib(d / "calib.txt", calib)
    write_poses(d / "poses.txt", seq.poses, calib)
    for f in seq.frames:
        write_scan(d / "velodyne" / f"{f.cloud.frame_id:06d}.bin", f.cloud)
        if f.labels is not None:
            write_labels(d / "labels" / f"{f.cloud.frame_id:06d}.label", f.labels)
    return d
