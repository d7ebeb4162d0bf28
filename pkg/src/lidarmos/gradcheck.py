"""Central finite-difference oracle for checking autograd gradients."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import torch


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """max |a - n| scaled by the larger of the two gradient magnitudes.

    Gradients smaller than ``floor`` (e.g. a bias feeding batch norm, exactly
    zero in theory) are compared in absolute terms against ``floor``.
    """
    if analytic.numel() == 0:
        return 0.0
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


@torch.no_grad()
def numerical_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, h: float = 1e-5,
                   indices: Optional[Iterable[int]] = None) -> torch.Tensor:
    """d fn() / d x by central differences, perturbing ``x`` in place.

    Only entries listed in ``indices`` (flat) are evaluated; the rest stay 0.
    """
    flat = x.data.view(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()) if indices is None else indices:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(fn())
        flat[i] = orig - h
        fm = float(fn())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.view_as(x)


@torch.no_grad()
def directional_derivative(fn: Callable[[], torch.Tensor], params, directions, h: float = 1e-5) -> float:
    """(f(p + h d) - f(p - h d)) / 2h for a joint perturbation of several tensors."""
    for p, d in zip(params, directions):
        p.data.add_(h * d)
    fp = float(fn())
    for p, d in zip(params, directions):
        p.data.sub_(2 * h * d)
    fm = float(fn())
    for p, d in zip(params, directions):
        p.data.add_(h * d)
    return (fp - fm) / (2 * h)


def check_gradients(fn: Callable[[], torch.Tensor], tensors, h: float = 1e-5,
                    max_entries: Optional[int] = None, generator=None) -> float:
    """Worst relative error between autograd and finite differences over ``tensors``.

    ``fn`` must be a deterministic scalar function of the tensors. With
    ``max_entries`` set, each tensor is checked on a random subset of entries.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        n = t.numel()
        if max_entries is not None and n > max_entries:
            idx = torch.randperm(n, generator=generator)[:max_entries].tolist()
        else:
            idx = list(range(n))
        num = numerical_grad(fn, t, h, idx).view(-1)[idx]
        worst = max(worst, relative_error(g.reshape(-1)[idx], num))
    return worst
