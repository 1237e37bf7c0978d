"""Ground-truth heatmaps and mask matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import LabeledPointCloud
from .queries import THING, QuerySet
from .voxel import VoxelGridSpec


def instance_centers(cloud: LabeledPointCloud):
    """``(ids, classes, bev_centers (n, 2), bev_radii (n,))`` of every instance."""
    ids = cloud.instance_ids()
    classes = np.empty(len(ids), dtype=np.int64)
    centers = np.empty((len(ids), 2))
    radii = np.empty(len(ids))
    xy = cloud.positions[:, :2].astype(np.float64)
    for j, iid in enumerate(ids):
        sel = cloud.instance == iid
        classes[j] = cloud.semantic[sel][0]
        centers[j] = xy[sel].mean(0)
        radii[j] = np.sqrt(((xy[sel] - centers[j]) ** 2).sum(1)).max()
    return ids, classes, centers, radii


def build_center_targets(cloud: LabeledPointCloud, spec: VoxelGridSpec, level: int) -> np.ndarray:
    """Gaussian splats on instance BEV centres, one channel per thing class."""
    H, W, _ = spec.level_dims(level)
    cell = spec.cell_size(level)[:2]
    target = np.zeros((cloud.n_things, H, W))
    rows, cols = np.arange(H)[:, None], np.arange(W)[None, :]
    _, classes, centers, radii = instance_centers(cloud)
    for cls, center, radius in zip(classes, centers, radii):
        r, c = np.floor((center - np.asarray(spec.origin[:2])) / cell).astype(int)
        if not (0 <= r < H and 0 <= c < W):
            continue
        sigma = max(1.0, radius / cell[0] / 3)
        g = np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * sigma**2))
        np.maximum(target[cls], g, out=target[cls])
    return target


def build_stuff_targets(cloud: LabeledPointCloud, spec: VoxelGridSpec, level: int) -> np.ndarray:
    """Full-resolution BEV stuff occupancy, area-averaged to ``level``."""
    H, W, _ = spec.dense_dims
    full = np.zeros((cloud.n_stuff, H, W))
    idx = spec.full_index(cloud.positions)
    stuff = (idx[:, 0] >= 0) & (cloud.semantic >= cloud.n_things)
    full[cloud.semantic[stuff] - cloud.n_things, idx[stuff, 0], idx[stuff, 1]] = 1.0
    s = spec.stride(level)
    h, w, _ = spec.level_dims(level)
    padded = np.zeros((cloud.n_stuff, h * s, w * s))
    padded[:, :H, :W] = full
    return padded.reshape(cloud.n_stuff, h, s, w, s).mean(axis=(2, 4))


@dataclass
class MatchedMasks:
    """Ground-truth mask index per query row (``-1`` = unmatched).

    ``segments[j]`` holds the point indices of ground-truth segment ``j``.
    """

    assignment: np.ndarray
    segments: list[np.ndarray]
    is_thing: np.ndarray

    @property
    def matched_rows(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)

    def target(self, row: int, n_points: int) -> np.ndarray:
        y = np.zeros(n_points)
        y[self.segments[self.assignment[row]]] = 1.0
        return y


def match_predictions(query_set: QuerySet, cloud: LabeledPointCloud, r_match: float = 1.0) -> MatchedMasks:
    """Things: nearest same-class instance centre within ``r_match``; stuff: by class."""
    ids, classes, centers, _ = instance_centers(cloud)
    segments = [np.flatnonzero(cloud.instance == iid) for iid in ids]
    stuff_seg = {}
    assignment = np.full(len(query_set), -1, dtype=np.int64)
    for row, q in enumerate(query_set.queries):
        if q.kind == THING:
            same = np.flatnonzero(classes == q.class_id)
            if same.size == 0:
                continue
            d = np.hypot(*(centers[same] - np.asarray(q.xy)).T)
            best = np.argmin(d)
            if d[best] <= r_match:
                assignment[row] = same[best]
        else:
            if q.class_id not in stuff_seg:
                pts = np.flatnonzero(cloud.semantic == q.class_id)
                stuff_seg[q.class_id] = len(segments) if pts.size else -1
                if pts.size:
                    segments.append(pts)
            assignment[row] = stuff_seg[q.class_id]
    return MatchedMasks(assignment, segments, query_set.is_thing())
