"""Per-frame training samples: range image, residual stack, pixel and point labels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .lidar_io import MosLabel, ScanSequence
from .projection import ProjectionConfig, RangeImage, build_range_image, pixel_labels
from .residuals import ResidualCache, build_residual_stack


@dataclass
class FrameData:
    sequence: str
    frame_id: int
    image: np.ndarray           # (5, h, w) float32, -1 at empty pixels
    residuals: np.ndarray       # (n_res, h, w) float32
    pixel_labels: np.ndarray    # (h, w) MOS labels of pixel winners
    points: np.ndarray          # (N, 3)
    point_labels: Optional[np.ndarray]
    range_image: RangeImage

    @property
    def proj_v(self) -> np.ndarray:
        return self.range_image.proj_v

    @property
    def proj_u(self) -> np.ndarray:
        return self.range_image.proj_u


def prepare_frame(seq: ScanSequence, l: int, config: ProjectionConfig, n_res: int,
                  cache: Optional[ResidualCache] = None) -> FrameData:
    frame = seq[l]
    img = build_range_image(frame.cloud, config)
    if cache is not None:
        stack = cache.stack(seq, l, n_res, config, img)
    else:
        stack = build_residual_stack(seq, l, n_res, config, img)
    labels = frame.labels.labels if frame.labels is not None else None
    plab = pixel_labels(img, labels) if labels is not None else np.zeros(img.shape, np.int64)
    return FrameData(
        seq.sequence_id, frame.cloud.frame_id,
        np.ascontiguousarray(img.channels.transpose(2, 0, 1), dtype=np.float32),
        stack.residuals.astype(np.float32), plab, frame.cloud.points, labels, img)


def prepare_frames(seq: ScanSequence, config: ProjectionConfig, n_res: int,
                   indices: Optional[Sequence[int]] = None,
                   cache: Optional[ResidualCache] = None) -> list:
    indices = range(len(seq)) if indices is None else indices
    return [prepare_frame(seq, i, config, n_res, cache) for i in indices]


# --- augmentation ----------------------------------------------------------------

def rotate_azimuth(image: np.ndarray, residuals: np.ndarray, labels: np.ndarray, shift: int):
    """Roll columns by ``shift`` and rotate x, y to match (a yaw of -2*pi*shift/w)."""
    w = image.shape[-1]
    image = np.roll(image, shift, axis=-1).copy()
    yaw = -2.0 * math.pi * shift / w
    c, s = math.cos(yaw), math.sin(yaw)
    valid = image[3] > 0
    x, y = image[0].copy(), image[1].copy()
    image[0] = np.where(valid, c * x - s * y, image[0])
    image[1] = np.where(valid, s * x + c * y, image[1])
    return image, np.roll(residuals, shift, axis=-1), np.roll(labels, shift, axis=-1)


def flip_horizontal(image: np.ndarray, residuals: np.ndarray, labels: np.ndarray):
    """Mirror columns and negate y."""
    image = image[..., ::-1].copy()
    valid = image[3] > 0
    image[1] = np.where(valid, -image[1], image[1])
    return image, residuals[..., ::-1].copy(), labels[..., ::-1].copy()


def drop_pixels(image, residuals, labels, prob: float, rng: np.random.Generator):
    """Blank a random fraction of valid pixels (as if their points were missing)."""
    drop = (image[3] > 0) & (rng.random(image.shape[1:]) < prob)
    image = image.copy()
    image[:, drop] = -1.0
    residuals = residuals.copy()
    residuals[:, drop] = 0.0
    labels = labels.copy()
    labels[drop] = MosLabel.UNLABELED
    return image, residuals, labels


def augment(sample: FrameData, rng: np.random.Generator, rotate=False, flip=False, drop_prob=0.0):
    image, res, lab = sample.image, sample.residuals, sample.pixel_labels
    if rotate:
        image, res, lab = rotate_azimuth(image, res, lab, int(rng.integers(image.shape[-1])))
    if flip and rng.random() < 0.5:
        image, res, lab = flip_horizontal(image, res, lab)
    if drop_prob > 0:
        image, res, lab = drop_pixels(image, res, lab, drop_prob, rng)
    return image, res, lab
