"""Dual-branch range-image network with motion-guided attention.

Enc-A encodes the 5-channel range image (x, y, z, range, intensity), Enc-M the
stack of residual images. At every fused encoder scale the motion features gate
the appearance features spatially and re-weight their channels; the decoder
upsamples with pixel shuffle and skip connections back to full resolution and a
1x1 ImageHead emits per-pixel class logits.

Channel widths are ``base_channels * 2**i`` at encoder stage ``i``; see
:func:`shape_table` for the full layout of a given config.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import torch
import torch.nn as nn

from . import ops
from .ops import Conv2d

# (x, y, z, range, intensity) statistics of KITTI HDL-64 scans
SENSOR_MEAN = (10.88, 0.23, -1.04, 12.12, 0.21)
SENSOR_STD = (11.47, 6.91, 0.86, 12.32, 0.16)


@dataclass
class NetworkConfig:
    n_res: int = 8
    base_channels: int = 16
    depth: int = 3
    head_classes: int = 2
    height: int = 64
    width: int = 256
    dual_branch: bool = True
    meta_kernel: bool = True
    softpool: bool = True
    # encoder stages that fuse motion into appearance; stage 0 is the full
    # resolution context stage, stage i the output of the i-th down block.
    # None means every stage.
    attention_scales: Optional[list] = None
    dropout: float = 0.2
    dropout_down: bool = True
    dropout_up: bool = True
    dropout_skip: bool = True
    circular_width: bool = True
    meta_hidden: int = 16
    sensor_mean: tuple = SENSOR_MEAN
    sensor_std: tuple = SENSOR_STD

    def __post_init__(self):
        if self.head_classes not in (2, 3):
            raise ValueError("head_classes must be 2 or 3")
        if self.base_channels * 2 % 4:
            raise ValueError("base_channels must be even so pixel shuffle can divide by 4")
        stages = set(range(self.depth + 1))
        if not set(self.scales) <= stages:
            raise ValueError(f"attention_scales must be a subset of {sorted(stages)}")
        if self.height % 2 ** self.depth or self.width % 2 ** self.depth:
            raise ValueError("image size must be divisible by 2**depth")
        self.sensor_mean = tuple(self.sensor_mean)
        self.sensor_std = tuple(self.sensor_std)

    @property
    def scales(self) -> list:
        if not self.dual_branch:
            return []
        if self.attention_scales is None:
            return list(range(self.depth + 1))
        return sorted(self.attention_scales)

    @property
    def channels(self) -> list:
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMaps:
    appearance: list = field(default_factory=list)
    motion: list = field(default_factory=list)
    gated: dict = field(default_factory=dict)
    fused: dict = field(default_factory=dict)


def _act():
    return nn.LeakyReLU(0.01)


class ResContextBlock(nn.Module):
    def __init__(self, in_ch, out_ch, circular=True):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 1, circular_width=circular)
        self.conv2 = Conv2d(out_ch, out_ch, 3, padding=1, circular_width=circular)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv3 = Conv2d(out_ch, out_ch, 3, padding=2, dilation=2, circular_width=circular)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.act = _act()

    def forward(self, x):
        shortcut = self.act(self.conv1(x))
        a = self.bn1(self.act(self.conv2(shortcut)))
        a = self.bn2(self.act(self.conv3(a)))
        return shortcut + a


class ResBlock(nn.Module):
    """Dilated residual block (BlockA/E) with optional pooling + dropout (BlockB)."""

    def __init__(self, in_ch, out_ch, pooling=True, softpool=True, dropout=0.0, circular=True):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 1, circular_width=circular)
        self.conv2 = Conv2d(in_ch, out_ch, 3, padding=1, circular_width=circular)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv3 = Conv2d(out_ch, out_ch, 3, padding=2, dilation=2, circular_width=circular)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv4 = Conv2d(out_ch, out_ch, 2, padding=1, dilation=2, circular_width=circular)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.conv5 = Conv2d(3 * out_ch, out_ch, 1, circular_width=circular)
        self.bn4 = nn.BatchNorm2d(out_ch)
        self.act = _act()
        self.drop = nn.Dropout(dropout)
        self.pooling = pooling
        self.pool = ops.SoftPool2d(2) if softpool else nn.AvgPool2d(2)

    def forward(self, x):
        shortcut = self.act(self.conv1(x))
        a1 = self.bn1(self.act(self.conv2(x)))
        a2 = self.bn2(self.act(self.conv3(a1)))
        a3 = self.bn3(self.act(self.conv4(a2)))
        a = self.bn4(self.act(self.conv5(torch.cat([a1, a2, a3], dim=1))))
        a = shortcut + a
        if not self.pooling:
            return self.drop(a)
        return self.pool(self.drop(a)), a


class UpBlock(nn.Module):
    """Pixel-shuffle upsampling (BlockC) + skip concatenation (BlockD) + dilated convs (BlockE)."""

    def __init__(self, in_ch, skip_ch, out_ch, dropout=0.0, drop_up=True, drop_skip=True, circular=True):
        super().__init__()
        mid = in_ch // 4 + skip_ch
        self.conv1 = Conv2d(mid, out_ch, 3, padding=1, circular_width=circular)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, padding=2, dilation=2, circular_width=circular)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv3 = Conv2d(out_ch, out_ch, 2, padding=1, dilation=2, circular_width=circular)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.conv4 = Conv2d(3 * out_ch, out_ch, 1, circular_width=circular)
        self.bn4 = nn.BatchNorm2d(out_ch)
        self.act = _act()
        self.drop_up = nn.Dropout(dropout if drop_up else 0.0)
        self.drop_skip = nn.Dropout(dropout if drop_skip else 0.0)
        self.drop_out = nn.Dropout(dropout if drop_up else 0.0)

    def forward(self, x, skip):
        up = self.drop_up(ops.pixel_shuffle(x, 2))
        if up.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"upsampled {tuple(up.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
        u = self.drop_skip(torch.cat([up, skip], dim=1))
        e1 = self.bn1(self.act(self.conv1(u)))
        e2 = self.bn2(self.act(self.conv2(e1)))
        e3 = self.bn3(self.act(self.conv3(e2)))
        e = self.bn4(self.act(self.conv4(torch.cat([e1, e2, e3], dim=1))))
        return self.drop_out(e)


def _neighbors(x: torch.Tensor, circular: bool) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, 9, H, W) 3x3 neighborhoods, row-major, zero beyond the top/bottom rows."""
    h, w = x.shape[-2:]
    p = ops.pad2d(x, 1, 1, circular)
    return torch.stack([p[..., i:i + h, j:j + w] for i in range(3) for j in range(3)], dim=2)


class MetaKernel(nn.Module):
    """3x3 convolution whose per-neighbor weights come from a shared MLP over relative xyz.

    For every pixel and each of its nine neighbors j, the MLP maps
    ``xyz_j - xyz_center`` to a weight vector ``w_j`` (one entry per input
    channel); ``g_j = w_j * f_j``; the nine ``g_j`` are concatenated and mixed
    by a 1x1 convolution. Invalid or out-of-image neighbors contribute zero.
    """

    def __init__(self, in_ch, out_ch, hidden=16, circular=True):
        super().__init__()
        self.in_ch = in_ch
        self.mlp = nn.Sequential(
            nn.Conv2d(3, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, in_ch, 1))
        self.aggregate = nn.Conv2d(9 * in_ch, out_ch, 1)
        self.circular = circular

    def forward(self, features, coords, valid):
        if coords.shape[1] != 3:
            raise ValueError(f"coords must have 3 channels, got {coords.shape[1]}")
        b, c, h, w = features.shape
        nb_xyz = _neighbors(coords, self.circular)
        rel = nb_xyz - coords.unsqueeze(2)
        weights = self.mlp(rel.reshape(b, 3, 9 * h, w)).reshape(b, c, 9, h, w)
        nb_valid = _neighbors(valid.to(features.dtype), self.circular)
        g = weights * nb_valid * _neighbors(features, self.circular)
        g = g.transpose(1, 2).reshape(b, 9 * c, h, w)
        return self.aggregate(g)


class MotionGuidedAttention(nn.Module):
    """Spatial gate from motion features, then channel re-weighting, plus identity."""

    def __init__(self, app_ch, motion_ch):
        super().__init__()
        self.spatial = nn.Conv2d(motion_ch, 1, 1)
        self.channel = nn.Conv2d(app_ch, app_ch, 1)

    def forward(self, f_a, f_m, return_gated=False):
        if f_a.shape[-2:] != f_m.shape[-2:]:
            raise ValueError("appearance and motion features differ in spatial size")
        gated = f_a * torch.sigmoid(self.spatial(f_m))
        c = f_a.shape[1]
        att = ops.softmax(self.channel(ops.spatial_mean(gated)), dim=1) * c
        fused = gated * att + f_a
        return (fused, gated) if return_gated else fused


class MotionSegNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        circ = cfg.circular_width
        in_a = 5 if cfg.dual_branch else 5 + cfg.n_res
        self.register_buffer("mean", torch.tensor(cfg.sensor_mean).view(1, 5, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.sensor_std).view(1, 5, 1, 1))

        self.context1 = ResContextBlock(in_a, ch[0], circ)
        if cfg.meta_kernel:
            self.meta = MetaKernel(ch[0], ch[0], cfg.meta_hidden, circ)
            self.meta_bn = nn.BatchNorm2d(ch[0])
            self.meta_act = _act()
        self.context2 = ResContextBlock(ch[0], ch[0], circ)
        drop = cfg.dropout if cfg.dropout_down else 0.0
        self.down = nn.ModuleList(
            ResBlock(ch[i], ch[i + 1], True, cfg.softpool, drop, circ) for i in range(cfg.depth))
        if cfg.dual_branch:
            self.motion_context = ResContextBlock(cfg.n_res, ch[0], circ)
            self.motion_down = nn.ModuleList(
                ResBlock(ch[i], ch[i + 1], True, cfg.softpool, drop, circ) for i in range(cfg.depth))
        self.attention = nn.ModuleDict({str(s): MotionGuidedAttention(ch[s], ch[s]) for s in cfg.scales})
        self.bottleneck = ResBlock(ch[-1], ch[-1], False, cfg.softpool, drop, circ)
        self.up = nn.ModuleList(
            UpBlock(ch[i + 1], ch[i + 1], ch[i], cfg.dropout, cfg.dropout_up, cfg.dropout_skip, circ)
            for i in range(cfg.depth))
        self.head = nn.Conv2d(ch[0], cfg.head_classes, 1)

    @property
    def feature_channels(self) -> int:
        return self.cfg.channels[0]

    def _fuse(self, s, a, m, maps):
        if str(s) not in self.attention:
            return a
        fused, gated = self.attention[str(s)](a, m, return_gated=True)
        maps.gated[s], maps.fused[s] = gated, fused
        return fused

    def forward_features(self, image, residuals):
        """Return ``(logits, decoder_features, FeatureMaps)``.

        ``image`` is the raw (B, 5, H, W) range image with -1 at empty pixels,
        ``residuals`` the (B, n_res, H, W) stack.
        """
        if image.shape[-2:] != residuals.shape[-2:]:
            raise ValueError("range image and residuals differ in spatial size")
        valid = image[:, 3:4] > 0
        x = (image - self.mean) / self.std * valid
        maps = FeatureMaps()
        if not self.cfg.dual_branch:
            x = torch.cat([x, residuals * valid], dim=1)
        a = self.context1(x)
        if self.cfg.meta_kernel:
            a = self.meta_act(self.meta_bn(self.meta(a, image[:, :3], valid)))
        a = self.context2(a)
        m = self.motion_context(residuals) if self.cfg.dual_branch else None
        maps.appearance.append(a)
        maps.motion.append(m)
        a = self._fuse(0, a, m, maps)

        skips = []
        for i in range(self.cfg.depth):
            a, skip = self.down[i](a)
            skips.append(skip)
            if self.cfg.dual_branch:
                m, _ = self.motion_down[i](m)
            maps.appearance.append(a)
            maps.motion.append(m)
            a = self._fuse(i + 1, a, m, maps)

        y = self.bottleneck(a)
        for i in reversed(range(self.cfg.depth)):
            y = self.up[i](y, skips[i])
        return self.head(y), y, maps

    def forward(self, image, residuals):
        return self.forward_features(image, residuals)[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def shape_table(cfg: NetworkConfig, height: Optional[int] = None, width: Optional[int] = None) -> list:
    """Rows of (stage, name, channels, height, width) for the encoder and decoder."""
    h = cfg.height if height is None else height
    w = cfg.width if width is None else width
    rows = [(0, "context", cfg.channels[0], h, w)]
    for i in range(cfg.depth):
        rows.append((i + 1, "down", cfg.channels[i + 1], h >> (i + 1), w >> (i + 1)))
    rows.append((cfg.depth, "bottleneck", cfg.channels[-1], h >> cfg.depth, w >> cfg.depth))
    for i in reversed(range(cfg.depth)):
        rows.append((i, "up", cfg.channels[i], h >> i, w >> i))
    rows.append((0, "head", cfg.head_classes, h, w))
    return rows
