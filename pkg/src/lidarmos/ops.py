"""Differentiable primitives for range-image networks.

Everything here is a thin layer over torch autograd. The functions pin down the
conventions the networks rely on: circular padding along the azimuth (width)
axis, non-overlapping SoftPool windows, and depth-to-space ordering for
pixel shuffle.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


def set_precision(double: bool) -> None:
    torch.set_default_dtype(torch.float64 if double else torch.float32)


def pad2d(x: Tensor, pad_h: int, pad_w: int, circular_width: bool = True) -> Tensor:
    """Zero-pad the height axis; wrap (or zero-pad) the width axis."""
    if pad_w:
        if circular_width:
            x = torch.cat([x[..., -pad_w:], x, x[..., :pad_w]], dim=-1)
        else:
            x = F.pad(x, (pad_w, pad_w, 0, 0))
    if pad_h:
        x = F.pad(x, (0, 0, pad_h, pad_h))
    return x


def conv2d(x: Tensor, weight: Tensor, bias=None, stride=1, dilation=1, padding=0,
           circular_width: bool = True) -> Tensor:
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    return F.conv2d(pad2d(x, ph, pw, circular_width), weight, bias, stride=stride, dilation=dilation)


class Conv2d(nn.Conv2d):
    """nn.Conv2d whose width padding wraps around the azimuth."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, dilation=1, bias=True,
                 circular_width=True):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=0, dilation=dilation, bias=bias)
        self.pad = (padding, padding) if isinstance(padding, int) else tuple(padding)
        self.circular_width = circular_width

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.dilation[0], self.pad, self.circular_width)


def softpool2d(x: Tensor, window: int = 2) -> Tensor:
    """Exponentially weighted average over non-overlapping windows: sum(x e^x) / sum(e^x)."""
    h, w = x.shape[-2:]
    if h % window or w % window:
        raise ValueError(f"spatial dims {(h, w)} not divisible by window {window}")
    # per-window max shift keeps exp() in range; it cancels in the ratio
    m = F.max_pool2d(x.detach(), window)
    m = m.repeat_interleave(window, dim=-2).repeat_interleave(window, dim=-1)
    e = torch.exp(x - m)
    return F.avg_pool2d(x * e, window) / F.avg_pool2d(e, window)


class SoftPool2d(nn.Module):
    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def forward(self, x):
        return softpool2d(x, self.window)


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    return F.avg_pool2d(x, window)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    if x.shape[1] % (r * r):
        raise ValueError(f"{x.shape[1]} channels not divisible by {r * r}")
    return F.pixel_shuffle(x, r)


def spatial_mean(x: Tensor) -> Tensor:
    """Global average pooling over (h, w), keeping dims."""
    return x.mean(dim=(-2, -1), keepdim=True)


def softmax(x: Tensor, dim: int) -> Tensor:
    if not -x.dim() <= dim < x.dim():
        raise IndexError(f"axis {dim} out of range for {x.dim()}-d tensor")
    return torch.softmax(x, dim=dim)


sigmoid = torch.sigmoid
relu = F.relu
leaky_relu = F.leaky_relu
concat = torch.cat
dropout = F.dropout
linear = F.linear
batch_norm = F.batch_norm


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    loss.backward()
