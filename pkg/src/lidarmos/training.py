"""Two-stage training: the 2D network on pixel labels, then the PointHead on point labels."""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .dataset import FrameData, augment
from .lidar_io import MosLabel
from .losses import class_frequencies, class_weights, lovasz_softmax, weighted_cross_entropy
from .metrics import ConfusionCounts, from_predictions, is_dynamic_frame, to_targets
from .network import MotionSegNet, NetworkConfig
from .pipeline import point_features, predict_points
from .point_head import PointHead, PointHeadConfig

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # exponential decay per epoch; 1.0 keeps the rate constant
    lr_decay: float = 1.0
    # stage 2 uses ``lr`` unless this is set
    lr_stage2: Optional[float] = None
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    batch_size: int = 2
    seed: int = 0
    threads: int = 1
    static_ratio: float = 1.0
    eval_every: int = 1
    aug_rotate: bool = False
    aug_flip: bool = False
    aug_drop: float = 0.0
    # class frequencies over the training split; computed from the data when None
    class_frequencies: Optional[list] = None

    def __post_init__(self):
        if self.lr < 0 or (self.lr_stage2 is not None and self.lr_stage2 < 0):
            raise ValueError("lr must be non-negative")
        if not 0 < self.static_ratio <= 1:
            raise ValueError("static_ratio must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_iou: float = -1.0
    best_epoch: int = -1


def seed_everything(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)


# --- optimizer -------------------------------------------------------------------

def param_groups(module: torch.nn.Module, weight_decay: float) -> list:
    """Weight decay on conv/linear kernels only, never on biases or norm parameters."""
    decay, no_decay = [], []
    for p in module.parameters():
        if not p.requires_grad:
            continue
        (decay if p.dim() > 1 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def make_optimizer(module: torch.nn.Module, cfg: TrainConfig, lr: Optional[float] = None) -> torch.optim.SGD:
    # torch SGD with dampening 0: v <- momentum*v + (g + wd*p); p <- p - lr*v
    lr = cfg.lr if lr is None else lr
    return torch.optim.SGD(param_groups(module, cfg.weight_decay), lr=lr, momentum=cfg.momentum)


def sgd_step(optimizer: torch.optim.Optimizer, names: Optional[dict] = None) -> None:
    """One momentum-SGD update; aborts before touching parameters if any gradient is non-finite."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                name = (names or {}).get(id(p), f"tensor{tuple(p.shape)}")
                bad = int((~torch.isfinite(p.grad)).sum())
                raise NumericalError(f"non-finite gradient in {name}: {bad} of {p.grad.numel()} entries")
    optimizer.step()


# --- frame sampling ----------------------------------------------------------------

def sample_training_frames(labels: Sequence, ratio: float, seed: int) -> list:
    """Keep all dynamic frames and a seeded ``ratio`` of static ones.

    ``labels`` holds per-frame MOS labels (arrays or MosLabels). Every maximal
    run of consecutive static frames keeps at least one member.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    dynamic = [is_dynamic_frame(l) for l in labels]
    static_idx = [i for i, d in enumerate(dynamic) if not d]
    if ratio == 1.0 or not static_idx:
        return list(range(len(labels)))
    runs, current = [], [static_idx[0]]
    for i in static_idx[1:]:
        if i == current[-1] + 1:
            current.append(i)
        else:
            runs.append(current)
            current = [i]
    runs.append(current)

    rng = np.random.default_rng(seed)
    keep = {int(rng.choice(run)) for run in runs}
    target = max(len(runs), int(round(ratio * len(static_idx))))
    rest = np.array([i for i in static_idx if i not in keep])
    if target > len(keep) and len(rest):
        keep.update(int(i) for i in rng.choice(rest, size=min(target - len(keep), len(rest)), replace=False))
    return sorted(keep | {i for i, d in enumerate(dynamic) if d})


# --- helpers ---------------------------------------------------------------------

def _weights(frames, head_classes, cfg: TrainConfig, point_level: bool):
    if cfg.class_frequencies is not None:
        freq = np.asarray(cfg.class_frequencies, float)
    else:
        targets = [to_targets(f.point_labels if point_level else f.pixel_labels, head_classes)[0] for f in frames]
        ignore = to_targets(np.array([0]), head_classes)[1]
        freq = class_frequencies(targets, head_classes, ignore)
    w = class_weights(freq)
    if head_classes == 3:
        w[MosLabel.UNLABELED] = 0.0
    return w


def _loss(probs, targets, weights, ignore):
    wce = weighted_cross_entropy(probs, targets, weights, ignore)
    ls = lovasz_softmax(probs, targets, "present", ignore)
    return wce + ls, wce, ls


def evaluate_frames(net, frames, head="image", post="none", point_head=None) -> ConfusionCounts:
    total = ConfusionCounts()
    for f in frames:
        pred = predict_points(net, f, head, post, point_head)
        total = total + ConfusionCounts.from_labels(pred, f.point_labels)
    return total


class JsonlLogger:
    """Line-oriented JSON training log."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record: dict) -> None:
        log.info("%s", record)
        if self.path:
            with self.path.open("a") as f:
                f.write(json.dumps(record) + "\n")


# --- stage 1 -----------------------------------------------------------------------

def train_stage1(frames: Sequence[FrameData], net: MotionSegNet, cfg: TrainConfig,
                 val_frames: Optional[Sequence[FrameData]] = None,
                 logger: Optional[Callable] = None) -> TrainResult:
    """Train the 2D network on pixel labels; keeps the weights of the best validation epoch."""
    if not frames:
        raise ValueError("empty training set")
    logger = logger or JsonlLogger()
    val_frames = frames if val_frames is None else val_frames
    seed_everything(cfg.seed, cfg.threads)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(net.parameters()).dtype
    n_classes = net.cfg.head_classes
    weights = _weights(frames, n_classes, cfg, point_level=False)
    opt = make_optimizer(net, cfg)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_decay)
    names = {id(p): n for n, p in net.named_parameters()}
    result = TrainResult()
    best_state = copy.deepcopy(net.state_dict())

    for epoch in range(cfg.epochs_stage1):
        net.train()
        t0 = time.perf_counter()
        order = rng.permutation(len(frames))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            batch = [frames[i] for i in order[start:start + cfg.batch_size]]
            imgs, ress, labs = zip(*(augment(f, rng, cfg.aug_rotate, cfg.aug_flip, cfg.aug_drop) for f in batch))
            img = torch.as_tensor(np.stack(imgs), dtype=dtype)
            res = torch.as_tensor(np.stack(ress), dtype=dtype)
            targets, ignore = to_targets(np.stack(labs), n_classes)
            probs = torch.softmax(net(img, res), dim=1)
            loss, wce, ls = _loss(probs, torch.as_tensor(targets), weights, ignore)
            opt.zero_grad()
            loss.backward()
            sgd_step(opt, names)
            sums += [loss.item() * len(batch), wce.item() * len(batch), ls.item() * len(batch)]
        sched.step()
        log.debug("stage 1 epoch %d took %.2f s", epoch, time.perf_counter() - t0)
        record = {"stage": 1, "epoch": epoch, "loss": float(sums[0] / len(frames)), "wce": float(sums[1] / len(frames)),
                  "lovasz": float(sums[2] / len(frames)), "lr": opt.param_groups[0]["lr"]}
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs_stage1 - 1:
            iou = evaluate_frames(net, val_frames).iou
            record["val_iou"] = iou
            if iou > result.best_iou:
                result.best_iou, result.best_epoch = iou, epoch
                best_state = copy.deepcopy(net.state_dict())
        result.history.append(record)
        logger(record)
    net.load_state_dict(best_state)
    net.eval()
    return result


# --- stage 2 -----------------------------------------------------------------------

def freeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def train_stage2(frames: Sequence[FrameData], net: MotionSegNet, head: PointHead, cfg: TrainConfig,
                 val_frames: Optional[Sequence[FrameData]] = None,
                 logger: Optional[Callable] = None, check_freeze: bool = True) -> TrainResult:
    """Train ``head`` on point labels with the 2D network frozen.

    The frozen network's digest is verified after every optimizer step.
    """
    if not frames:
        raise ValueError("empty training set")
    logger = logger or JsonlLogger()
    val_frames = frames if val_frames is None else val_frames
    seed_everything(cfg.seed, cfg.threads)
    rng = np.random.default_rng(cfg.seed)
    freeze(net)
    frozen = ckpt.digest(net)
    n_classes = net.cfg.head_classes
    feats = [point_features(net, f) for f in frames]
    val_feats = feats if val_frames is frames else [point_features(net, f) for f in val_frames]
    weights = _weights(frames, n_classes, cfg, point_level=True)
    opt = make_optimizer(head, cfg, cfg.lr_stage2)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_decay)
    names = {id(p): n for n, p in head.named_parameters()}
    result = TrainResult()
    best_state = copy.deepcopy(head.state_dict())

    def validate():
        head.eval()
        total = ConfusionCounts()
        with torch.no_grad():
            for f, pf in zip(val_frames, val_feats):
                pred = head(f.points, pf).argmax(1).numpy()
                total = total + ConfusionCounts.from_labels(from_predictions(pred, n_classes), f.point_labels)
        return total.iou

    if cfg.epochs_stage2 == 0:
        result.best_iou = validate()
    for epoch in range(cfg.epochs_stage2):
        head.train()
        t0 = time.perf_counter()
        order = rng.permutation(len(frames))
        total_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            batch_loss = 0.0
            for i in idx:
                targets, ignore = to_targets(frames[i].point_labels, n_classes)
                probs = torch.softmax(head(frames[i].points, feats[i]), dim=1)
                loss = _loss(probs, torch.as_tensor(targets), weights, ignore)[0] / len(idx)
                loss.backward()
                batch_loss += loss.item()
            sgd_step(opt, names)
            if check_freeze and ckpt.digest(net) != frozen:
                raise FreezeViolation("2D network parameters changed during stage 2")
            total_loss += batch_loss * len(idx)
        sched.step()
        log.debug("stage 2 epoch %d took %.2f s", epoch, time.perf_counter() - t0)
        record = {"stage": 2, "epoch": epoch, "loss": total_loss / len(frames),
                  "lr": opt.param_groups[0]["lr"]}
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs_stage2 - 1:
            iou = validate()
            record["val_iou"] = iou
            if iou > result.best_iou:
                result.best_iou, result.best_epoch = iou, epoch
                best_state = copy.deepcopy(head.state_dict())
        result.history.append(record)
        logger(record)
    head.load_state_dict(best_state)
    head.eval()
    return result


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, net: MotionSegNet, head: Optional[PointHead] = None, stage: int = 1,
                    extra: Optional[dict] = None) -> None:
    arrays = ckpt.state_arrays(net, "net.")
    meta = {"stage": stage, "network": net.cfg.to_dict(), **(extra or {})}
    if head is not None:
        arrays.update(ckpt.state_arrays(head, "head."))
        meta["point_head"] = head.cfg.to_dict()
    ckpt.save_arrays(path, arrays, meta)


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild ``(net, head_or_None, meta)`` from a checkpoint file."""
    arrays, meta = ckpt.load_arrays(path)
    ncfg = dict(meta["network"])
    net = MotionSegNet(NetworkConfig.from_dict(ncfg)).to(dtype)
    ckpt.load_state(net, arrays, "net.")
    net.eval()
    head = None
    if "point_head" in meta:
        head = PointHead(net.feature_channels, net.cfg.head_classes, PointHeadConfig(**meta["point_head"])).to(dtype)
        ckpt.load_state(head, arrays, "head.")
        head.eval()
    return net, head, meta
