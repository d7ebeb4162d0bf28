"""Command-line entry point: synth, project, train, eval, bench."""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, builtin_config, set_path
from .dataset import prepare_frames
from .evaluate import bench, bench_text, evaluate
from .lidar_io import FormatError, load_remap, read_sequence, write_sequence
from .metrics import report_csv, report_text
from .network import MotionSegNet
from .pipeline import KnnParams
from .point_head import PointHead
from .projection import build_range_image, save_preview
from .residuals import ResidualCache
from .synthetic import DegenerateSceneError, generate_synthetic_sequence, toy_config
from .training import (FreezeViolation, JsonlLogger, NumericalError, load_checkpoint, sample_training_frames,
                       save_checkpoint, seed_everything, train_stage1, train_stage2)

log = logging.getLogger("lidarmos")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5


class UsageError(Exception):
    pass


# --- helpers ---------------------------------------------------------------------

def load_config(args) -> ExperimentConfig:
    path = Path(args.config) if args.config else builtin_config("toy.yaml")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        set_path(raw, key.strip(), value)
    if getattr(args, "seed", None) is not None:
        raw.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "root", None):
        raw.setdefault("data", {})["root"] = args.root
    if getattr(args, "out", None) and args.command == "train":
        raw["output"] = args.out
    return ExperimentConfig.from_dict(raw)


def load_frames(cfg: ExperimentConfig, sequences):
    remap = load_remap(cfg.data.remap) if cfg.data.remap else None
    cache = ResidualCache(cfg.data.cache) if cfg.data.cache else None
    out = {}
    for s in sequences:
        seq = read_sequence(cfg.data.root, s, remap)
        out[s] = prepare_frames(seq, cfg.projection_config, cfg.n_res, cache=cache)
    return out


def plain(d):
    """Round-trip through JSON so tuples become lists for YAML output."""
    return json.loads(json.dumps(d))


# --- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.toy:
        scfg = toy_config()
    else:
        cfg = load_config(args)
        if cfg.synthetic is None:
            raise ConfigError("config has no 'synthetic' section")
        scfg = cfg.synthetic
    if args.seq:
        scfg.sequence_id = args.seq
    seq = generate_synthetic_sequence(scfg)
    d = write_sequence(args.out, seq)
    n_moving = sum(f.labels.n_moving for f in seq.frames)
    print(f"wrote {len(seq)} frames to {d} ({n_moving} moving points)")
    return EXIT_OK


def cmd_project(args) -> int:
    cfg = load_config(args)
    seq = read_sequence(cfg.data.root, args.seq, load_remap(cfg.data.remap) if cfg.data.remap else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    final = out / args.seq
    tmp = Path(tempfile.mkdtemp(prefix=f".{args.seq}-", dir=out))
    try:
        for sub in ("range", "index") + (("preview",) if args.preview else ()):
            (tmp / sub).mkdir()
        for frame in seq.frames:
            img = build_range_image(frame.cloud, cfg.projection_config)
            name = f"{frame.cloud.frame_id:06d}"
            np.save(tmp / "range" / f"{name}.npy", img.channels.astype("<f4"))
            np.save(tmp / "index" / f"{name}.npy", img.index_map.astype("<i4"))
            if args.preview:
                labels = frame.labels.labels if frame.labels is not None else None
                save_preview(tmp / "preview" / f"{name}.png", img, labels)
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(seq)} range images ({cfg.projection['height']}x{cfg.projection['width']}) to {final}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.output)
    stage1_path = Path(args.checkpoint) if args.checkpoint else out / "stage1.ckpt"
    if args.stage == "2" and not stage1_path.exists():
        raise UsageError(f"stage 2 needs a stage-1 checkpoint; {stage1_path} does not exist")
    tc = cfg.train
    seed_everything(tc.seed, tc.threads)
    frames = load_frames(cfg, cfg.data.train)
    train_frames = []
    for seq_frames in frames.values():
        labels = [f.point_labels for f in seq_frames]
        if any(l is None for l in labels):
            raise FormatError("training sequences must carry labels")
        keep = sample_training_frames(labels, tc.static_ratio, tc.seed)
        train_frames += [seq_frames[i] for i in keep]
    val = [f for v in load_frames(cfg, cfg.data.val).values() for f in v] if cfg.data.val != cfg.data.train \
        else [f for v in frames.values() for f in v]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False))
    logger = JsonlLogger(out / "train.jsonl" if args.stage != "2" else out / "train_stage2.jsonl")

    if args.stage in ("1", "all"):
        torch.manual_seed(tc.seed)
        net = MotionSegNet(cfg.network)
        if args.resume:
            net, _, _ = load_checkpoint(args.resume)
        r = train_stage1(train_frames, net, tc, val, logger)
        save_checkpoint(out / "stage1.ckpt", net, stage=1, extra={"best_iou": r.best_iou, "best_epoch": r.best_epoch})
        print(f"stage 1: best moving IoU {100 * r.best_iou:.2f} at epoch {r.best_epoch}")
    if args.stage in ("2", "all"):
        net, _, _ = load_checkpoint(stage1_path if args.stage == "2" else out / "stage1.ckpt")
        torch.manual_seed(tc.seed)
        head = PointHead(net.feature_channels, net.cfg.head_classes, cfg.point_head)
        r = train_stage2(train_frames, net, head, tc, val, logger)
        save_checkpoint(out / "stage2.ckpt", net, head, stage=2,
                        extra={"best_iou": r.best_iou, "best_epoch": r.best_epoch})
        print(f"stage 2: best moving IoU {100 * r.best_iou:.2f} at epoch {r.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    net, head, _ = load_checkpoint(args.checkpoint)
    if args.head == "point" and head is None:
        raise UsageError(f"{args.checkpoint} has no PointHead; train stage 2 first")
    if args.all_modes:
        modes = [("image", "none"), ("image", "knn")] + ([("point", "none")] if head is not None else [])
    else:
        modes = [(args.head, args.post)]
    seqs = args.seqs or cfg.data.val
    frames = load_frames(cfg, seqs)
    knn = KnnParams(args.k, args.window, args.sigma, args.cutoff)
    rows = evaluate(frames, net, modes, head, knn)
    print(report_text(rows), end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".csv").write_text(report_csv(rows))
        out.with_suffix(".txt").write_text(report_text(rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    torch.set_num_threads(cfg.train.threads)
    net = head = None
    net_cfg, head_cfg = cfg.network, cfg.point_head
    if args.checkpoint:
        net, head, _ = load_checkpoint(args.checkpoint)
        net_cfg = net.cfg
        head_cfg = head.cfg if head is not None else head_cfg
    rows = bench(net_cfg, head_cfg, args.points, args.iters, args.warmup, cfg.train.seed, net, head,
                 cfg.projection_config)
    print(bench_text(rows, args.points), end="")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lidarmos", description="LiDAR moving-object segmentation on range images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment YAML (default: the shipped toy config)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=0.02 (repeatable)")

    sp = sub.add_parser("synth", help="write a synthetic labeled sequence in KITTI layout")
    common(sp)
    sp.add_argument("--out", required=True, help="dataset root")
    sp.add_argument("--seq", help="sequence id (default from config)")
    sp.add_argument("--toy", action="store_true", help="use the one-ray-per-pixel toy scene")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("project", help="write range images and index maps for a sequence")
    common(sp)
    sp.add_argument("--root", help="dataset root (overrides config)")
    sp.add_argument("--seq", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--preview", action="store_true", help="also write a PNG per frame")
    sp.set_defaults(func=cmd_project)

    sp = sub.add_parser("train", help="two-stage training")
    common(sp)
    sp.add_argument("--stage", choices=("1", "2", "all"), default="all")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--root", help="dataset root (overrides config)")
    sp.add_argument("--out", help="run directory (overrides config)")
    sp.add_argument("--checkpoint", help="stage-1 checkpoint for --stage 2 (default: <out>/stage1.ckpt)")
    sp.add_argument("--resume", help="initialize stage 1 from this checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="moving-object IoU per sequence")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--root", help="dataset root (overrides config)")
    sp.add_argument("--seqs", nargs="+", help="sequences (default: config val split)")
    sp.add_argument("--head", choices=("image", "point"), default="image")
    sp.add_argument("--post", choices=("none", "knn"), default="none")
    sp.add_argument("--all-modes", action="store_true", help="report every ablation mode side by side")
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--window", type=int, default=5)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--cutoff", type=float, default=1.0)
    sp.add_argument("--out", help="report path prefix; writes .csv and .txt")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="per-stage runtime on random frames")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--points", type=int, default=122_000)
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=2)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, CheckpointError, DegenerateSceneError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FreezeViolation, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # remaining ValueErrors come from argument values (k, window, iters, ...)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
