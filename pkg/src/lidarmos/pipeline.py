"""Inference: image-head predictions, back-projection, kNN or PointHead refinement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .dataset import FrameData
from .lidar_io import MosLabel
from .metrics import from_predictions
from .network import MotionSegNet
from .point_head import PointHead
from .postprocess import knn_refine


@dataclass
class KnnParams:
    k: int = 5
    window: int = 5
    sigma: float = 1.0
    cutoff: float = 1.0


def back_project_tensor(features: torch.Tensor, proj_v: np.ndarray, proj_u: np.ndarray) -> torch.Tensor:
    """(C, h, w) feature map -> (N, C) per-point features; out-of-view points get zeros."""
    c = features.shape[0]
    v = torch.as_tensor(proj_v, dtype=torch.long)
    u = torch.as_tensor(proj_u, dtype=torch.long)
    inview = v >= 0
    gathered = features[:, v.clamp_min(0), u.clamp_min(0)].T
    return gathered * inview[:, None].to(features.dtype)


def to_tensors(frames, dtype=None):
    dtype = dtype or torch.get_default_dtype()
    img = torch.as_tensor(np.stack([f.image for f in frames]), dtype=dtype)
    res = torch.as_tensor(np.stack([f.residuals for f in frames]), dtype=dtype)
    return img, res


@torch.no_grad()
def image_outputs(net: MotionSegNet, frame: FrameData):
    """(logits (C, h, w), decoder features (F, h, w)) for one frame, eval mode."""
    net.eval()
    img, res = to_tensors([frame], next(net.parameters()).dtype)
    logits, feats, _ = net.forward_features(img, res)
    return logits[0], feats[0]


def point_features(net: MotionSegNet, frame: FrameData) -> torch.Tensor:
    _, feats = image_outputs(net, frame)
    return back_project_tensor(feats, frame.proj_v, frame.proj_u)


@torch.no_grad()
def predict_points(net: MotionSegNet, frame: FrameData, head: str = "image", post: str = "none",
                   point_head: Optional[PointHead] = None, knn: Optional[KnnParams] = None) -> np.ndarray:
    """Per-point MOS labels under one of the ablation modes."""
    n_classes = net.cfg.head_classes
    logits, feats = image_outputs(net, frame)
    if head == "point":
        if point_head is None:
            raise ValueError("head='point' needs a trained PointHead")
        point_head.eval()
        pf = back_project_tensor(feats, frame.proj_v, frame.proj_u)
        return from_predictions(point_head(frame.points, pf).argmax(1).numpy(), n_classes)
    if head != "image":
        raise ValueError(f"unknown head {head!r}")
    pix = from_predictions(logits.argmax(0).numpy(), n_classes)
    if post == "knn":
        knn = knn or KnnParams()
        return knn_refine(frame.points, pix, frame.range_image, knn.k, knn.window, knn.sigma, knn.cutoff)
    if post != "none":
        raise ValueError(f"unknown post-processing {post!r}")
    return back_project_labels(pix, frame)


def back_project_labels(pix_labels: np.ndarray, frame: FrameData) -> np.ndarray:
    out = np.full(len(frame.points), int(MosLabel.STATIC), dtype=np.int64)
    inview = frame.proj_v >= 0
    out[inview] = pix_labels[frame.proj_v[inview], frame.proj_u[inview]]
    return out
