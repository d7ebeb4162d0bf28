"""Point refinement head: sparse voxel branch + point MLP branch over back-projected features."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

OFFSETS = torch.tensor(list(itertools.product((-1, 0, 1), repeat=3)), dtype=torch.long)
CENTER = 13


@dataclass
class SparseVoxelGrid:
    coords: torch.Tensor          # (M, 3) int64, unique, lexicographically sorted
    features: torch.Tensor        # (M, C)
    point_to_voxel: torch.Tensor  # (N,) int64
    voxel_size: float
    _nbr: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return len(self.coords)

    def with_features(self, features: torch.Tensor) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, features, self.point_to_voxel, self.voxel_size, self._nbr)

    def neighbors(self) -> torch.Tensor:
        """(M, 27) index of each occupied neighbor site, -1 where empty."""
        if self._nbr is None:
            self._nbr = neighbor_table(self.coords)
        return self._nbr


def neighbor_table(coords: torch.Tensor) -> torch.Tensor:
    m = len(coords)
    if m == 0:
        return torch.empty((0, 27), dtype=torch.long)
    lo = coords.min(0).values - 1
    ext = coords.max(0).values - lo + 2

    def key(c):
        c = c - lo
        return (c[..., 0] * ext[1] + c[..., 1]) * ext[2] + c[..., 2]

    keys = key(coords)
    order = torch.argsort(keys)
    sorted_keys = keys[order]
    q = key(coords[:, None, :] + OFFSETS[None])
    pos = torch.searchsorted(sorted_keys, q).clamp_max(m - 1)
    hit = sorted_keys[pos] == q
    return torch.where(hit, order[pos], torch.full_like(pos, -1))


def voxelize(points, features: torch.Tensor, voxel_size: float, reduce: str = "mean") -> SparseVoxelGrid:
    """Group points into voxels ``floor(p / voxel_size)`` and pool their features."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64).reshape(-1, 3)
    if features.shape[0] != len(pts):
        raise ValueError(f"{features.shape[0]} feature rows for {len(pts)} points")
    vox = torch.from_numpy(np.floor(pts / voxel_size).astype(np.int64))
    if len(vox) == 0:
        return SparseVoxelGrid(vox.reshape(0, 3), features[:0], vox.reshape(0), voxel_size)
    coords, inverse = torch.unique(vox, dim=0, return_inverse=True)
    m, c = len(coords), features.shape[1]
    if reduce == "mean":
        sums = features.new_zeros((m, c)).index_add(0, inverse, features)
        counts = torch.bincount(inverse, minlength=m).to(features.dtype)
        pooled = sums / counts[:, None]
    elif reduce == "max":
        pooled = features.new_zeros((m, c)).scatter_reduce(
            0, inverse[:, None].expand(-1, c), features, "amax", include_self=False)
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    return SparseVoxelGrid(coords, pooled, inverse, voxel_size)


def devoxelize(grid: SparseVoxelGrid) -> torch.Tensor:
    return grid.features[grid.point_to_voxel]


class SparseConv3d(nn.Module):
    """Submanifold 3x3x3 convolution: outputs only at the occupied input sites."""

    def __init__(self, in_ch: int, out_ch: int, bias: bool = True, stride: int = 1):
        super().__init__()
        if stride != 1:
            raise ValueError("only stride 1 (submanifold) convolution is supported")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = nn.Parameter(torch.empty(3, 3, 3, in_ch, out_ch))
        self.bias = nn.Parameter(torch.zeros(out_ch)) if bias else None
        bound = 1.0 / math.sqrt(27 * in_ch)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, grid: SparseVoxelGrid) -> SparseVoxelGrid:
        f = grid.features
        if f.shape[1] != self.in_ch:
            raise ValueError(f"grid has {f.shape[1]} channels, layer expects {self.in_ch}")
        nbr = grid.neighbors()
        padded = torch.cat([f, f.new_zeros((1, self.in_ch))])
        idx = torch.where(nbr < 0, torch.full_like(nbr, len(f)), nbr)
        w = self.weight.reshape(27, self.in_ch, self.out_ch)
        out = f.new_zeros((len(f), self.out_ch))
        for k in range(27):
            out = out + padded[idx[:, k]] @ w[k]
        if self.bias is not None:
            out = out + self.bias
        return grid.with_features(out)


@dataclass
class PointHeadConfig:
    hidden: int = 32
    sparse_layers: int = 2
    mlp_layers: int = 2
    voxel_size: float = 0.25
    reduce: str = "mean"
    coord_scale: float = 50.0

    @classmethod
    def lite(cls, **kw) -> "PointHeadConfig":
        return cls(sparse_layers=1, mlp_layers=1, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


class PointHead(nn.Module):
    """Per-point classifier fusing a sparse-voxel branch and a point-wise MLP branch.

    Both branches see the back-projected 2D features concatenated with the
    point's scaled xyz. Their outputs are concatenated and mapped to class
    scores by a small fully connected stack.
    """

    def __init__(self, in_ch: int, n_classes: int, cfg: Optional[PointHeadConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or PointHeadConfig()
        d_in = in_ch + 3
        self.sparse = nn.ModuleList(
            SparseConv3d(d_in if i == 0 else cfg.hidden, cfg.hidden) for i in range(cfg.sparse_layers))
        mlp = []
        for i in range(cfg.mlp_layers):
            mlp += [nn.Linear(d_in if i == 0 else cfg.hidden, cfg.hidden), nn.ReLU()]
        self.point_mlp = nn.Sequential(*mlp)
        self.fuse = nn.Sequential(
            nn.Linear(2 * cfg.hidden, cfg.hidden), nn.ReLU(), nn.Linear(cfg.hidden, n_classes))

    def voxel_branch(self, xyz, x) -> torch.Tensor:
        grid = voxelize(xyz, x, self.cfg.voxel_size, self.cfg.reduce)
        for conv in self.sparse:
            grid = conv(grid)
            grid = grid.with_features(torch.relu(grid.features))
        return devoxelize(grid)

    def forward(self, xyz, point_features: torch.Tensor) -> torch.Tensor:
        """Class logits (N, n_classes) for points ``xyz`` (N, 3) with features (N, C)."""
        xyz_np = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        coords = torch.as_tensor(xyz_np / self.cfg.coord_scale, dtype=point_features.dtype)
        x = torch.cat([point_features, coords], dim=1)
        return self.fuse(torch.cat([self.voxel_branch(xyz_np, x), self.point_mlp(x)], dim=1))
