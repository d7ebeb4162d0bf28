"""Weighted cross-entropy and Lovász-Softmax losses.

Both take class probabilities of shape (N, C) (or (B, C, H, W), flattened
internally) and integer targets; items whose target equals ``ignore_index``
are dropped before anything is computed.
"""
from __future__ import annotations

import warnings
from typing import Optional, Sequence, Union

import numpy as np
import torch

LOG_EPS = 1e-12


def class_weights(frequencies: Sequence[float]) -> np.ndarray:
    """Inverse square-root frequency weights; classes never seen get weight 0."""
    f = np.asarray(frequencies, dtype=np.float64)
    w = np.zeros_like(f)
    w[f > 0] = 1.0 / np.sqrt(f[f > 0])
    return w


def class_frequencies(targets, n_classes: int, ignore_index: Optional[int] = None) -> np.ndarray:
    t = np.concatenate([np.asarray(x).reshape(-1) for x in targets]) if isinstance(targets, (list, tuple)) \
        else np.asarray(targets).reshape(-1)
    if ignore_index is not None:
        t = t[t != ignore_index]
    counts = np.bincount(t, minlength=n_classes)[:n_classes].astype(np.float64)
    total = counts.sum()
    return counts / total if total else counts


def _flatten(probs: torch.Tensor, truth: torch.Tensor, ignore_index: Optional[int]):
    if probs.dim() == 4:
        c = probs.shape[1]
        probs = probs.permute(0, 2, 3, 1).reshape(-1, c)
        truth = truth.reshape(-1)
    truth = truth.reshape(-1).long()
    if probs.shape[0] != truth.shape[0]:
        raise ValueError(f"{probs.shape[0]} predictions for {truth.shape[0]} labels")
    if ignore_index is not None:
        keep = truth != ignore_index
        probs, truth = probs[keep], truth[keep]
    return probs, truth


def weighted_cross_entropy(probs: torch.Tensor, truth: torch.Tensor, weights=None,
                           ignore_index: Optional[int] = None) -> torch.Tensor:
    """Mean over labeled items of ``-alpha[y] * log p[y]``."""
    probs, truth = _flatten(probs, truth, ignore_index)
    if truth.numel() == 0:
        return probs.sum() * 0.0
    p_true = probs.gather(1, truth[:, None]).squeeze(1)
    if bool((p_true < LOG_EPS).any()):
        warnings.warn(f"cross-entropy: {int((p_true < LOG_EPS).sum())} items with p(true) below {LOG_EPS:g} clamped",
                      RuntimeWarning, stacklevel=2)
    nll = -torch.log(p_true.clamp_min(LOG_EPS))
    if weights is not None:
        w = torch.as_tensor(weights, dtype=probs.dtype, device=probs.device)
        nll = nll * w[truth]
    return nll.mean()


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1.0 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1].clone()
    return jaccard


def lovasz_softmax(probs: torch.Tensor, truth: torch.Tensor,
                   classes: Union[str, Sequence[int]] = "present",
                   ignore_index: Optional[int] = None) -> torch.Tensor:
    """Lovász-Softmax loss averaged over classes.

    ``classes="present"`` skips classes absent from ``truth``; ``"all"`` or an
    explicit list evaluates the listed classes regardless.
    """
    probs, truth = _flatten(probs, truth, ignore_index)
    if truth.numel() == 0:
        return probs.sum() * 0.0
    n_classes = probs.shape[1]
    if classes in ("present", "all"):
        which = range(n_classes)
    else:
        which = classes
    losses = []
    for c in which:
        fg = (truth == c).to(probs.dtype)
        if classes == "present" and fg.sum() == 0:
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        losses.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


def combined_loss(probs: torch.Tensor, truth: torch.Tensor, weights=None,
                  ignore_index: Optional[int] = None) -> torch.Tensor:
    return (weighted_cross_entropy(probs, truth, weights, ignore_index)
            + lovasz_softmax(probs, truth, "present", ignore_index))
