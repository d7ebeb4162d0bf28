"""Per-sequence IoU evaluation across the ablation modes, and stage timing."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .dataset import FrameData
from .lidar_io import Frame, FormatError, PointCloud, Pose, ScanSequence
from .metrics import ConfusionCounts, EvalRow, aggregate
from .network import MotionSegNet, NetworkConfig
from .pipeline import KnnParams, back_project_tensor, image_outputs, predict_points
from .point_head import PointHead, PointHeadConfig
from .projection import ProjectionConfig, build_range_image
from .residuals import build_residual_stack

# (head, post) -> report column
MODES = {
    ("image", "none"): "w/o kNN",
    ("image", "knn"): "w/ kNN",
    ("point", "none"): "w/ PointHead",
}


def mode_name(head: str, post: str) -> str:
    return MODES.get((head, post), f"{head}+{post}")


def evaluate(sequences: Mapping[str, Sequence[FrameData]], net: MotionSegNet,
             modes: Sequence[tuple] = (("image", "none"),), point_head: Optional[PointHead] = None,
             knn: Optional[KnnParams] = None) -> list:
    """One row per (sequence, mode) plus an aggregate row per mode."""
    rows = []
    for head, post in modes:
        name = mode_name(head, post)
        per_seq = []
        for seq_id, frames in sequences.items():
            total = ConfusionCounts()
            for f in frames:
                if f.point_labels is None:
                    raise FormatError(f"sequence {seq_id} frame {f.frame_id} has no labels")
                pred = predict_points(net, f, head, post, point_head, knn)
                total = total + ConfusionCounts.from_labels(pred, f.point_labels)
            per_seq.append(EvalRow(seq_id, name, total))
        rows += per_seq
        if len(per_seq) > 1:
            rows.append(aggregate(per_seq, name))
    return rows


# --- timing ------------------------------------------------------------------------

@dataclass
class BenchRow:
    stage: str
    mean_ms: float
    std_ms: float
    iters: int


def time_call(fn: Callable, iters: int = 10, warmup: int = 2) -> BenchRow:
    if iters < 1:
        raise ValueError("iters must be at least 1")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(1000.0 * (time.perf_counter() - t0))
    return BenchRow("", float(np.mean(samples)), float(np.std(samples)), iters)


def random_sequence(n_points: int, n_frames: int, config: ProjectionConfig, seed: int = 0,
                    step: float = 0.5) -> ScanSequence:
    """In-FOV random scans on a sensor moving along x; for timing only.

    Points are emitted beam by beam in azimuth order, as a spinning sensor would.
    """
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(n_frames):
        beam = rng.integers(0, config.height, n_points)
        az = rng.uniform(-math.pi, math.pi, n_points)
        order = np.lexsort((-az, beam))
        beam, az = beam[order], az[order]
        el = config.fov_up - (beam + 0.5) * config.fov / config.height
        r = rng.uniform(2.0, 80.0, n_points)
        pts = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], axis=1)
        cloud = PointCloud(pts, rng.random(n_points), t)
        frames.append(Frame(cloud, Pose(np.eye(3), np.array([t * step, 0.0, 0.0]))))
    return ScanSequence(tuple(frames), "bench")


def bench(net_cfg: NetworkConfig, head_cfg: PointHeadConfig, n_points: int = 122_000,
          iters: int = 10, warmup: int = 2, seed: int = 0, net: Optional[MotionSegNet] = None,
          head: Optional[PointHead] = None, config: Optional[ProjectionConfig] = None) -> list:
    """Mean per-frame wall time of each pipeline stage."""
    config = config or ProjectionConfig.from_degrees(net_cfg.height, net_cfg.width)
    seq = random_sequence(n_points, net_cfg.n_res + 1, config, seed)
    l = len(seq) - 1
    torch.manual_seed(seed)
    net = net or MotionSegNet(net_cfg)
    net.eval()
    head = head or PointHead(net.feature_channels, net_cfg.head_classes, head_cfg)
    lite = PointHead(net.feature_channels, net_cfg.head_classes,
                     PointHeadConfig.lite(**{k: v for k, v in head_cfg.to_dict().items()
                                             if k not in ("sparse_layers", "mlp_layers")}))
    head.eval()
    lite.eval()
    cloud = seq[l].cloud
    image = build_range_image(cloud, config)
    stack = build_residual_stack(seq, l, net_cfg.n_res, config, image)
    frame = FrameData("bench", l, np.ascontiguousarray(image.channels.transpose(2, 0, 1), np.float32),
                      stack.residuals.astype(np.float32), np.zeros(image.shape, np.int64), cloud.points, None, image)

    def v1():
        return predict_points(net, frame)

    def v2(ph):
        def run():
            with torch.no_grad():
                _, feats = image_outputs(net, frame)
                pf = back_project_tensor(feats, frame.proj_v, frame.proj_u)
                return ph(frame.points, pf).argmax(1)
        return run

    stages = [
        ("projection", lambda: build_range_image(cloud, config)),
        ("residuals", lambda: build_residual_stack(seq, l, net_cfg.n_res, config, image)),
        ("forward v1", v1),
        ("forward v2", v2(head)),
        ("forward v2-lite", v2(lite)),
    ]
    rows = []
    for name, fn in stages:
        row = time_call(fn, iters, warmup)
        row.stage = name
        rows.append(row)
    return rows


def bench_text(rows: Sequence[BenchRow], n_points: int) -> str:
    lines = [f"Per-frame wall time ({n_points} points)", f"{'stage':<18}{'mean ms':>10}{'std ms':>10}{'iters':>7}"]
    for r in rows:
        lines.append(f"{r.stage:<18}{r.mean_ms:>10.2f}{r.std_ms:>10.2f}{r.iters:>7}")
    return "\n".join(lines) + "\n"
