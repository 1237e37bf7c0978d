"""BEV heads and decoupled thing/stuff query generation.

Thing queries are read from the BEV embedding at center-heatmap peaks; stuff
queries come from class-fixed learnable queries attending over the whole BEV
map. Proposals from all levels are then fused into one query set.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .voxel import SparseVoxelGrid, VoxelGridSpec, v2b_project

THING, STUFF = "thing", "stuff"


@dataclass
class BevMaps:
    level: int
    embedding: torch.Tensor  # (C_e, H, W)
    center_heatmap: torch.Tensor  # (N_th, H, W), in (0, 1)
    stuff_map: torch.Tensor  # (N_st, H, W), in (0, 1)
    stuff_queries: torch.Tensor | None = None  # (N_st, C_e)


@dataclass
class QueryProposal:
    embedding: torch.Tensor
    class_id: int
    kind: str
    level: int
    score: float
    bev_pos: tuple[int, int] | None = None
    xy: tuple[float, float] | None = None
    n_members: int = 1


@dataclass
class QuerySet:
    things: list[QueryProposal] = field(default_factory=list)
    stuff: list[QueryProposal] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.things) + len(self.stuff)

    @property
    def queries(self) -> list[QueryProposal]:
        return self.things + self.stuff

    def embeddings(self) -> torch.Tensor:
        return torch.stack([q.embedding for q in self.queries])

    def classes(self) -> np.ndarray:
        return np.array([q.class_id for q in self.queries], dtype=np.int64)

    def is_thing(self) -> np.ndarray:
        return np.array([q.kind == THING for q in self.queries], dtype=bool)

    def scores(self) -> np.ndarray:
        return np.array([q.score for q in self.queries], dtype=np.float64)


class BevEmbedding(nn.Module):
    """V2B projection followed by two 3x3 convolutions with channel and spatial gates.

    Voxel features are first reduced to ``voxel_channels`` per voxel (no bias)
    to keep the stacked height channels small. No layer before the gates
    carries a bias, so an all-zero grid maps to an all-zero embedding.
    """

    def __init__(self, in_channels: int, depth: int, embed: int, voxel_channels: int = 8):
        super().__init__()
        self.reduce = nn.Linear(in_channels, voxel_channels, bias=False)
        self.conv1 = nn.Conv2d(voxel_channels * depth, embed, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(embed, embed, 3, padding=1, bias=False)
        hidden = max(embed // 4, 4)
        self.channel_gate = nn.Sequential(nn.Linear(embed, hidden), nn.ReLU(), nn.Linear(hidden, embed))
        self.spatial_gate = nn.Conv2d(embed, 1, 1)

    def forward(self, grid: SparseVoxelGrid, features: torch.Tensor | None = None) -> torch.Tensor:
        feats = grid.features if features is None else features
        x = v2b_project(grid, self.reduce(feats))
        x = torch.relu(self.conv1(x[None]))
        x = self.conv2(x)
        x = x * torch.sigmoid(self.channel_gate(x.mean(dim=(2, 3))))[:, :, None, None]
        x = x * torch.sigmoid(self.spatial_gate(x))
        return x[0]


class CenterHead(nn.Module):
    def __init__(self, embed: int, n_things: int, prior: float = 0.1):
        super().__init__()
        self.conv = nn.Conv2d(embed, embed, 3, padding=1)
        self.out = nn.Conv2d(embed, n_things, 1)
        with torch.no_grad():
            self.out.bias.fill_(-math.log((1 - prior) / prior))

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(embedding))

    def logits(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.out(torch.relu(self.conv(embedding[None])))[0]


class StuffHead(nn.Module):
    """Class-fixed learnable queries cross-attending over the flattened BEV map."""

    def __init__(self, embed: int, n_stuff: int):
        super().__init__()
        self.embed = embed
        self.learned = nn.Parameter(torch.randn(n_stuff, embed) / math.sqrt(embed))
        self.phi_q = nn.Linear(embed, embed)
        self.phi_k = nn.Linear(embed, embed)
        self.phi_v = nn.Linear(embed, embed)
        self.phi_map = nn.Linear(n_stuff, n_stuff)
        self.phi_query = nn.Linear(embed, embed)
        with torch.no_grad():
            self.phi_map.weight.copy_(torch.eye(n_stuff))
            self.phi_map.bias.zero_()

    def attention_logits(self, embedding: torch.Tensor) -> torch.Tensor:
        flat = embedding.flatten(1).T  # (HW, C_e)
        return self.phi_q(self.learned) @ self.phi_k(flat).T / math.sqrt(self.embed)

    def forward(self, embedding: torch.Tensor):
        """Return ``(stuff_map (N_st, H, W), stuff_queries (N_st, C_e))``."""
        _, H, W = embedding.shape
        attn = self.attention_logits(embedding)
        stuff_map = torch.sigmoid(self.phi_map(attn.T).T).reshape(-1, H, W)
        pooled = torch.softmax(attn, dim=1) @ self.phi_v(embedding.flatten(1).T)
        return stuff_map, self.phi_query(pooled)


def local_peaks(heatmap: torch.Tensor) -> torch.Tensor:
    """Boolean mask of cells equal to the max of their 3x3 neighbourhood."""
    pooled = F.max_pool2d(heatmap[None], 3, stride=1, padding=1)[0]
    return heatmap == pooled


def select_thing_proposals(
    maps: BevMaps, n_queries: int, spec: VoxelGridSpec, use_peaks: bool = True, min_score: float = 0.0
) -> list[QueryProposal]:
    """Top-``n_queries`` heatmap cells ranked jointly over classes.

    Ties are broken by ``(channel, row, col)`` in lexicographic order.
    """
    heat = maps.center_heatmap.detach()
    keep = local_peaks(heat) if use_peaks else torch.ones_like(heat, dtype=torch.bool)
    keep &= heat >= min_score
    flat = torch.nonzero(keep.flatten()).flatten().numpy()
    scores = heat.flatten()[flat].double().numpy()
    order = np.lexsort((flat, -scores))[:n_queries]
    _, H, W = heat.shape
    ch, rem = np.divmod(flat[order], H * W)
    rows, cols = np.divmod(rem, W)
    # one gather per level keeps the backward pass to a single scatter
    emb = maps.embedding.flatten(1)[:, torch.as_tensor(rem)].T
    out = []
    for i, j in enumerate(order):
        r, c = int(rows[i]), int(cols[i])
        x, y, _ = spec.cell_center(maps.level, (r, c, 0))
        out.append(QueryProposal(emb[i], int(ch[i]), THING, maps.level, float(scores[j]), (r, c), (float(x), float(y))))
    return out


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    """Cosine similarity; exactly 1.0 only for bitwise-identical vectors."""
    a, b = a.detach(), b.detach()
    if torch.equal(a, b):
        return 1.0
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return min(float(a @ b / (na * nb)), math.nextafter(1.0, 0.0))


def fuse_thing_proposals(proposals, theta: float = 0.85, window_m: float = 1.0) -> list[QueryProposal]:
    """Average same-class proposals that share a BEV window and are cosine-similar.

    Groups are formed greedily, highest score first, against the group's
    seed proposal. ``theta > 1`` disables fusion.
    """
    buckets = defaultdict(list)
    for i, p in enumerate(proposals):
        key = (p.class_id, math.floor(p.xy[0] / window_m), math.floor(p.xy[1] / window_m))
        buckets[key].append(i)
    fused = []
    for key in sorted(buckets):
        members = sorted(buckets[key], key=lambda i: (-proposals[i].score, i))
        used = set()
        for seed in members:
            if seed in used:
                continue
            group = [seed]
            used.add(seed)
            for other in members:
                if other not in used and cosine(proposals[seed].embedding, proposals[other].embedding) >= theta:
                    group.append(other)
                    used.add(other)
            fused.append(_merge([proposals[i] for i in group]))
    fused.sort(key=lambda q: (-q.score, q.class_id, q.xy))
    return fused


def _merge(group: list[QueryProposal]) -> QueryProposal:
    if len(group) == 1:
        return group[0]
    w = np.array([p.score for p in group])
    xy = np.array([p.xy for p in group])
    pos = (w[:, None] * xy).sum(0) / w.sum() if w.sum() > 0 else xy.mean(0)
    return QueryProposal(
        torch.stack([p.embedding for p in group]).mean(0),
        group[0].class_id,
        THING,
        min(p.level for p in group),
        float(w.max()),
        group[0].bev_pos,
        (float(pos[0]), float(pos[1])),
        n_members=sum(p.n_members for p in group),
    )


def fuse_stuff_proposals(stuff_queries, stuff_maps, theta: float = 0.5, n_things: int = 0, require_existence=True):
    """Average per-level stuff queries of every class whose map reaches ``theta``.

    Class ids in the returned proposals are global (offset by ``n_things``).
    """
    peak = torch.stack([m.detach().flatten(1).amax(1) for m in stuff_maps]).amax(0)
    mean_q = torch.stack(list(stuff_queries)).mean(0)
    out = []
    for c in range(mean_q.shape[0]):
        score = float(peak[c])
        if score >= theta or not require_existence:
            out.append(QueryProposal(mean_q[c], n_things + c, STUFF, -1, score))
    return out
