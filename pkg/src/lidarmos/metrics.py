"""Moving-object IoU, dynamic-frame rule, and evaluation reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .lidar_io import MosLabel

DYNAMIC_FRAME_MIN_MOVING = 100


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @classmethod
    def from_labels(cls, pred, truth) -> "ConfusionCounts":
        pred = np.asarray(pred).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if pred.shape != truth.shape:
            raise ValueError(f"{len(pred)} predictions for {len(truth)} labels")
        keep = truth != MosLabel.UNLABELED
        p = pred[keep] == MosLabel.MOVING
        t = truth[keep] == MosLabel.MOVING
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def no_movers(self) -> bool:
        return self.tp + self.fp + self.fn == 0

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom


def moving_iou(pred, truth) -> float:
    """TP / (TP + FP + FN) for the moving class; 1.0 when nothing moves in either."""
    return ConfusionCounts.from_labels(pred, truth).iou


def is_dynamic_frame(truth) -> bool:
    labels = getattr(truth, "labels", truth)
    return int(np.count_nonzero(np.asarray(labels) == MosLabel.MOVING)) > DYNAMIC_FRAME_MIN_MOVING


# --- label <-> head class mapping ------------------------------------------------

def to_targets(labels, head_classes: int):
    """MOS labels -> (class targets, ignore_index) for a 2- or 3-class head."""
    labels = np.asarray(labels)
    if head_classes == 3:
        return labels.astype(np.int64), int(MosLabel.UNLABELED)
    return np.where(labels == MosLabel.UNLABELED, -1, labels - 1).astype(np.int64), -1


def from_predictions(classes, head_classes: int) -> np.ndarray:
    """Argmax class indices -> MOS labels (never UNLABELED)."""
    classes = np.asarray(classes)
    if head_classes == 3:
        return np.where(classes == MosLabel.MOVING, MosLabel.MOVING, MosLabel.STATIC).astype(np.int64)
    return np.where(classes == 1, MosLabel.MOVING, MosLabel.STATIC).astype(np.int64)


def moving_class_index(head_classes: int) -> int:
    return 2 if head_classes == 3 else 1


# --- reports -------------------------------------------------------------------

@dataclass
class EvalRow:
    sequence: str
    mode: str
    counts: ConfusionCounts

    @property
    def note(self) -> str:
        return "no-movers" if self.counts.no_movers else ""


def aggregate(rows: Iterable[EvalRow], mode: str) -> EvalRow:
    total = ConfusionCounts()
    for r in rows:
        total = total + r.counts
    return EvalRow("all", mode, total)


def report_csv(rows: Iterable[EvalRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequence", "mode", "moving_iou", "tp", "fp", "fn", "note"])
    for r in rows:
        c = r.counts
        w.writerow([r.sequence, r.mode, f"{100 * c.iou:.2f}", c.tp, c.fp, c.fn, r.note])
    return buf.getvalue()


def report_text(rows: Iterable[EvalRow]) -> str:
    rows = list(rows)
    modes = list(dict.fromkeys(r.mode for r in rows))
    seqs = list(dict.fromkeys(r.sequence for r in rows))
    cell = {(r.sequence, r.mode): r for r in rows}
    width = max(12, *(len(m) + 2 for m in modes))
    lines = ["Moving-object IoU (%)", "sequence".ljust(10) + "".join(m.rjust(width) for m in modes)]
    for s in seqs:
        line = s.ljust(10)
        notes = set()
        for m in modes:
            r = cell.get((s, m))
            line += (f"{100 * r.counts.iou:.2f}" if r else "-").rjust(width)
            if r and r.note:
                notes.add(r.note)
        lines.append(line + (f"  ({', '.join(sorted(notes))})" if notes else ""))
    return "\n".join(lines) + "\n"
