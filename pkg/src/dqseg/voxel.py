"""Voxelization, point features, voxel-to-point interpolation and BEV projection.

Level ``i`` of a :class:`VoxelGridSpec` has cells ``1 / scales[i]`` times as
large as the full-resolution voxels. Coarse indices are derived from the
full-resolution index by floor division, so every level nests exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .cloud import LabeledPointCloud
from .errors import ContractError, ValidationError

DEFAULT_SCALES = (1 / 8, 1 / 4, 1 / 2, 1.0)
IDW_EPS = 1e-8


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float] = (-12.8, -12.8, -1.0)
    voxel_size: tuple[float, float, float] = (0.1, 0.1, 0.1)
    dense_dims: tuple[int, int, int] = (256, 256, 44)
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        for name in ("origin", "voxel_size", "dense_dims", "scales"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.origin) != 3 or len(self.voxel_size) != 3 or len(self.dense_dims) != 3:
            raise ValidationError("origin, voxel_size and dense_dims need three components")
        if min(self.voxel_size) <= 0:
            raise ValidationError("voxel_size must be positive")
        if min(self.dense_dims) < 1:
            raise ValidationError("dense_dims must be >= 1")
        if not self.scales or self.scales[-1] != 1.0:
            raise ValidationError("the last level must be the full resolution (scale 1)")
        for s in self.scales:
            stride = 1 / s
            if s <= 0 or abs(stride - round(stride)) > 1e-9 or int(round(stride)) & (int(round(stride)) - 1):
                raise ValidationError(f"scale {s} is not 1 / 2^k")

    @classmethod
    def from_range(cls, xy_range, z_range, voxel_size, scales=DEFAULT_SCALES) -> "VoxelGridSpec":
        size = np.broadcast_to(np.asarray(voxel_size, dtype=float), 3)
        lo = np.array([-xy_range, -xy_range, z_range[0]])
        hi = np.array([xy_range, xy_range, z_range[1]])
        dims = np.round((hi - lo) / size).astype(int)
        return cls(tuple(lo.tolist()), tuple(size.tolist()), tuple(dims.tolist()), tuple(scales))

    @property
    def n_levels(self) -> int:
        return len(self.scales)

    @property
    def range_xy(self) -> float:
        return 0.5 * self.dense_dims[0] * self.voxel_size[0]

    def stride(self, level: int) -> int:
        return int(round(1 / self.scales[level]))

    def level_dims(self, level: int) -> tuple[int, int, int]:
        s = self.stride(level)
        return tuple(-(-d // s) for d in self.dense_dims)

    def cell_size(self, level: int) -> np.ndarray:
        return np.asarray(self.voxel_size) * self.stride(level)

    def cell_center(self, level: int, index) -> np.ndarray:
        return np.asarray(self.origin) + (np.asarray(index, dtype=float) + 0.5) * self.cell_size(level)

    def full_index(self, positions) -> np.ndarray:
        """Full-resolution integer index per point, ``-1`` rows when out of range."""
        p = np.asarray(positions)
        origin = np.asarray(self.origin)
        if p.dtype == np.float32:
            # compare at the cloud's precision so a point stored at the origin lands in voxel 0
            origin = origin.astype(np.float32)
        p = p.astype(np.float64)
        idx = np.floor((p - origin.astype(np.float64)) / np.asarray(self.voxel_size)).astype(np.int64)
        inside = ((idx >= 0) & (idx < np.asarray(self.dense_dims))).all(axis=1)
        idx[~inside] = -1
        return idx

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("origin", "voxel_size", "dense_dims", "scales")}


@dataclass(eq=False)
class SparseVoxelGrid:
    """Occupied voxels of one level with optional per-voxel features."""

    level: int
    coords: np.ndarray
    point_to_voxel: np.ndarray
    spec: VoxelGridSpec
    features: torch.Tensor | None = None

    @property
    def n_voxels(self) -> int:
        return len(self.coords)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.spec.level_dims(self.level)

    def centers(self) -> np.ndarray:
        return self.spec.cell_center(self.level, self.coords)

    def with_features(self, features) -> "SparseVoxelGrid":
        features = torch.as_tensor(features)
        if features.shape[0] != self.n_voxels:
            raise ContractError(f"{features.shape[0]} feature rows for {self.n_voxels} voxels")
        return SparseVoxelGrid(self.level, self.coords, self.point_to_voxel, self.spec, features)


def _linear_keys(coords: np.ndarray, dims) -> np.ndarray:
    dims = np.asarray(dims, dtype=np.int64) + 2
    c = coords + 1
    return (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]


def voxelize(cloud: LabeledPointCloud | np.ndarray, spec: VoxelGridSpec, level: int = -1) -> SparseVoxelGrid:
    positions = cloud.positions if isinstance(cloud, LabeledPointCloud) else cloud
    level = level % spec.n_levels
    full = spec.full_index(positions)
    inside = full[:, 0] >= 0
    idx = full[inside] // spec.stride(level)
    coords, inverse = np.unique(idx, axis=0, return_inverse=True)
    p2v = np.full(len(full), -1, dtype=np.int64)
    p2v[inside] = inverse.reshape(-1)
    return SparseVoxelGrid(level, coords.reshape(-1, 3).astype(np.int64), p2v, spec)


def point_representation(cloud: LabeledPointCloud, grid: SparseVoxelGrid, use_range: bool = True) -> np.ndarray:
    """Per-point input rows ``[x, y, z, intensity, dx, dy, dz, range_norm]``.

    The offsets are taken to the centre of the point's voxel in ``grid``.
    Without ``use_range`` the last column is dropped.
    """
    if len(grid.point_to_voxel) != len(cloud):
        raise ContractError(f"grid maps {len(grid.point_to_voxel)} points, cloud has {len(cloud)}")
    p = cloud.positions.astype(np.float64)
    offsets = np.zeros_like(p)
    inside = grid.point_to_voxel >= 0
    offsets[inside] = p[inside] - grid.centers()[grid.point_to_voxel[inside]]
    cols = [p, cloud.intensity.astype(np.float64)[:, None], offsets]
    if use_range:
        cols.append((np.hypot(p[:, 0], p[:, 1]) / grid.spec.range_xy)[:, None])
    return np.concatenate(cols, axis=1)


def pool_voxel_features(point_feats, grid_or_p2v, n_voxels: int | None = None) -> torch.Tensor:
    """Componentwise max of member-point features per voxel."""
    if isinstance(grid_or_p2v, SparseVoxelGrid):
        p2v, n_voxels = grid_or_p2v.point_to_voxel, grid_or_p2v.n_voxels
    else:
        p2v = grid_or_p2v
    feats = torch.as_tensor(point_feats)
    p2v = torch.as_tensor(p2v)
    keep = p2v >= 0
    if not keep.all():
        feats, p2v = feats[keep], p2v[keep]
    out = feats.new_zeros(n_voxels, feats.shape[1])
    index = p2v[:, None].expand_as(feats)
    return out.scatter_reduce(0, index, feats, reduce="amax", include_self=False)


def knn_weights(centers: np.ndarray, query: np.ndarray, k: int = 3, eps: float = IDW_EPS):
    """Indices of the ``k`` nearest centres and inverse-distance weights.

    Neighbours are ordered by increasing distance. Returns ``(idx, w)`` with
    shapes ``(n_query, k')`` where ``k' = min(k, n_centers)``.
    """
    if len(centers) == 0:
        raise ContractError("cannot interpolate from an empty voxel grid")
    if k < 1:
        raise ContractError("k must be >= 1")
    k = min(k, len(centers))
    query = np.asarray(query, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    _, idx = cKDTree(centers).query(query, k=k)
    idx = np.asarray(idx).reshape(len(query), k)
    # Recompute distances exactly so that results do not depend on the tree.
    d = np.sqrt(((query[:, None, :] - centers[idx]) ** 2).sum(-1))
    order = np.lexsort((idx, d), axis=1)
    idx = np.take_along_axis(idx, order, 1)
    d = np.take_along_axis(d, order, 1)
    inv = 1.0 / (d + eps)
    total = inv[:, 0].copy()
    for j in range(1, k):
        total = total + inv[:, j]
    return idx, inv / total[:, None]


def interpolate(features: torch.Tensor, idx, weights) -> torch.Tensor:
    idx = torch.as_tensor(idx)
    weights = torch.as_tensor(weights, dtype=features.dtype)
    out = weights[:, 0:1] * features.index_select(0, idx[:, 0])
    for j in range(1, idx.shape[1]):
        out = out + weights[:, j : j + 1] * features.index_select(0, idx[:, j])
    return out


def v2p_interpolate(grid: SparseVoxelGrid, query_points, k: int = 3, eps: float = IDW_EPS) -> torch.Tensor:
    if grid.features is None:
        raise ContractError("grid has no features")
    idx, w = knn_weights(grid.centers(), query_points, k, eps)
    return interpolate(torch.as_tensor(grid.features), idx, w)


def v2b_project(grid: SparseVoxelGrid, features=None) -> torch.Tensor:
    """Dense BEV volume of shape ``(C * D, H, W)``; channel block ``d`` holds height slice ``d``."""
    feats = torch.as_tensor(grid.features if features is None else features)
    H, W, D = grid.dims
    C = feats.shape[1]
    c = torch.as_tensor(grid.coords)
    lin = (c[:, 2] * H + c[:, 0]) * W + c[:, 1]
    dense = feats.new_zeros(D * H * W, C).index_copy(0, lin, feats)
    return dense.view(D, H, W, C).permute(0, 3, 1, 2).reshape(D * C, H, W)


def neighbor_table(coords: np.ndarray, dims, radius: int = 1) -> np.ndarray:
    """Row indices of the ``(2r+1)^3`` neighbours of every voxel, ``-1`` if empty.

    The centre offset comes first.
    """
    keys = _linear_keys(coords, dims)
    order = np.argsort(keys)
    sorted_keys = keys[order]
    r = range(-radius, radius + 1)
    offsets = np.array([(a, b, c) for a in r for b in r for c in r])
    offsets = offsets[np.argsort(np.abs(offsets).sum(1), kind="stable")]
    dims_arr = np.asarray(dims)
    table = np.full((len(coords), len(offsets)), -1, dtype=np.int64)
    for j, off in enumerate(offsets):
        nb = coords + off
        valid = ((nb >= 0) & (nb < dims_arr)).all(1)
        nk = _linear_keys(nb, dims)
        pos = np.clip(np.searchsorted(sorted_keys, nk), 0, len(keys) - 1)
        hit = valid & (sorted_keys[pos] == nk)
        table[hit, j] = order[pos[hit]]
    return table


def parent_index(fine: SparseVoxelGrid, coarse: SparseVoxelGrid) -> np.ndarray:
    """Row of ``coarse`` containing each voxel of ``fine``."""
    ratio = fine.spec.stride(coarse.level) // fine.spec.stride(fine.level)
    want = _linear_keys(fine.coords // ratio, coarse.dims)
    keys = _linear_keys(coarse.coords, coarse.dims)
    pos = np.searchsorted(keys, want)
    if not np.array_equal(keys[np.clip(pos, 0, len(keys) - 1)], want):
        raise ContractError("coarse grid does not cover the fine grid")
    return pos
