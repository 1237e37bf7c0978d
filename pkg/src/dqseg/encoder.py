"""Sparse multi-scale voxel encoder.

A U-shaped stack over four nested voxel levels. Each block is a per-voxel
MLP followed by a max over the 3x3x3 voxel neighbourhood; down-sampling
max-merges children into their stride-2 parent, up-sampling copies the
parent feature to its children and adds the skip connection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .cloud import LabeledPointCloud
from .errors import EmptySceneError
from .voxel import (
    SparseVoxelGrid,
    VoxelGridSpec,
    interpolate,
    knn_weights,
    neighbor_table,
    parent_index,
    point_representation,
    pool_voxel_features,
    voxelize,
)


@dataclass
class SceneGeometry:
    """Everything about a scene that does not depend on learned weights."""

    cloud: LabeledPointCloud
    spec: VoxelGridSpec
    grids: list[SparseVoxelGrid]  # coarse to fine
    neighbors: list[torch.Tensor]
    parents: list[torch.Tensor]  # parents[i]: row in grids[i] of each voxel in grids[i + 1]
    knn: list[tuple[torch.Tensor, torch.Tensor]]
    point_input: torch.Tensor

    @property
    def n_points(self) -> int:
        return len(self.cloud)


def prepare_geometry(
    cloud: LabeledPointCloud, spec: VoxelGridSpec, k: int = 3, use_range: bool = True
) -> SceneGeometry:
    grids = [voxelize(cloud, spec, level) for level in range(spec.n_levels)]
    if grids[-1].n_voxels == 0:
        raise EmptySceneError("no point of the cloud lies inside the voxel grid")
    neighbors = [_pack(torch.as_tensor(neighbor_table(g.coords, g.dims))) for g in grids]
    parents = [torch.as_tensor(parent_index(grids[i + 1], grids[i])) for i in range(len(grids) - 1)]
    pos = cloud.positions.astype(np.float64)
    knn = []
    for g in grids:
        idx, w = knn_weights(g.centers(), pos, k)
        knn.append((torch.as_tensor(idx), torch.as_tensor(w)))
    point_input = torch.as_tensor(point_representation(cloud, grids[-1], use_range))
    return SceneGeometry(cloud, spec, grids, neighbors, parents, knn, point_input)


def _pack(table: torch.Tensor) -> torch.Tensor:
    """Move occupied neighbours to the front (order kept) and drop all-empty columns."""
    order = torch.argsort((table < 0).to(torch.int8), dim=1, stable=True)
    width = max(int((table >= 0).sum(1).max()), 1) if len(table) else 1
    return table.gather(1, order)[:, :width]


def _uniform_init(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


class _NeighborhoodMax(torch.autograd.Function):
    """Max over gathered rows; backward scatters into the winning source rows only."""

    @staticmethod
    def forward(ctx, x, table):
        pad = torch.cat([x, torch.full_like(x[:1], -torch.inf)], dim=0)
        idx = torch.where(table >= 0, table, x.shape[0])
        n, k = idx.shape
        values, arg = pad.index_select(0, idx.reshape(-1)).view(n, k, -1).max(dim=1)
        ctx.save_for_backward(idx.gather(1, arg) if idx.shape[1] > 1 else idx.expand_as(arg))
        ctx.n = x.shape[0]
        return values

    @staticmethod
    def backward(ctx, grad):
        (src,) = ctx.saved_tensors
        out = grad.new_zeros(ctx.n + 1, grad.shape[1]).scatter_add_(0, src, grad)
        return out[: ctx.n], None


def neighborhood_max(x: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Max over each voxel's occupied neighbours (the voxel itself included)."""
    return _NeighborhoodMax.apply(x, table)


class VoxelBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.mix = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, table):
        h = torch.relu(self.mix(x))
        return torch.relu(x + self.out(neighborhood_max(h, table)))


class FeatureEncoder(nn.Module):
    """Returns per-level voxel features and interpolated point embeddings.

    Level order is coarse to fine, i.e. scales ``[1/8, 1/4, 1/2, 1]``.
    """

    def __init__(self, in_dim: int = 8, base: int = 32, embed: int = 64, n_levels: int = 4, seed: int = 0):
        super().__init__()
        self.n_levels = n_levels
        self.point_mlp = nn.Sequential(nn.Linear(in_dim, base), nn.ReLU(), nn.Linear(base, base))
        self.down = nn.ModuleList(VoxelBlock(base) for _ in range(n_levels))
        self.up = nn.ModuleList(VoxelBlock(base) for _ in range(n_levels - 1))
        self.heads = nn.ModuleList(nn.Linear(base, embed) for _ in range(n_levels))
        _uniform_init(self, torch.Generator().manual_seed(seed))

    def forward(self, geom: SceneGeometry):
        dtype = self.point_mlp[0].weight.dtype
        grids, nbr, parents = geom.grids, geom.neighbors, geom.parents
        fine = grids[-1]
        x = self.point_mlp(geom.point_input.to(dtype))
        x = pool_voxel_features(x, fine)

        skips = [None] * self.n_levels
        for level in range(self.n_levels - 1, -1, -1):
            if level < self.n_levels - 1:
                x = pool_voxel_features(x, parents[level], grids[level].n_voxels)
            x = self.down[level](x, nbr[level])
            skips[level] = x

        outs = [x]
        for level in range(1, self.n_levels):
            x = skips[level] + x.index_select(0, parents[level - 1])
            x = self.up[level - 1](x, nbr[level])
            outs.append(x)

        voxel_feats = [head(o) for head, o in zip(self.heads, outs)]
        point_feats = [interpolate(f, *geom.knn[i]) for i, f in enumerate(voxel_feats)]
        return voxel_feats, point_feats

    def encode(self, cloud: LabeledPointCloud, spec: VoxelGridSpec, k: int = 3, use_range: bool = True):
        """Convenience wrapper: ``(voxel grids with features, point embeddings)``."""
        geom = prepare_geometry(cloud, spec, k, use_range)
        voxel_feats, point_feats = self(geom)
        grids = [g.with_features(f) for g, f in zip(geom.grids, voxel_feats)]
        return grids, point_feats
