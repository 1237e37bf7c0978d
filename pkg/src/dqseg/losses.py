"""Heatmap focal loss, sub-sampled BCE + Dice mask loss, and the semantic loss."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .targets import MatchedMasks

log = logging.getLogger(__name__)

PROB_EPS = 1e-6


def focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Penalty-reduced pixelwise focal loss, summed over all cells."""
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = target == 1
    pos_term = (1 - p) ** alpha * torch.log(p)
    neg_term = (1 - target) ** beta * p**alpha * torch.log(1 - p)
    return -torch.where(pos, pos_term, neg_term).sum()


def heatmap_loss(levels, n_queries: int, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Sum over levels of FL(things) / N_q + FL(stuff) / (H_i W_i).

    ``levels`` is an iterable of ``(M_th, Y_th, M_st, Y_st)`` tuples.
    """
    total = 0.0
    for m_th, y_th, m_st, y_st in levels:
        y_th = torch.as_tensor(y_th, dtype=m_th.dtype)
        y_st = torch.as_tensor(y_st, dtype=m_st.dtype)
        hw = m_st.shape[-1] * m_st.shape[-2]
        total = total + focal_loss(m_th, y_th, alpha, beta) / n_queries + focal_loss(m_st, y_st, alpha, beta) / hw
    return total


def sample_points(matched: MatchedMasks, n_points: int, s_th: int, s_all: int, rng: np.random.Generator):
    """Point indices used for each matched row's mask loss, ``(n_rows, n_samples)``.

    Thing rows take up to ``s_th`` points of their object and fill up to
    ``s_all`` with other scene points; stuff rows take ``s_all`` scene
    points. With ``s_all >= n_points`` every row uses the whole scene.
    """
    rows = matched.matched_rows
    if s_all >= n_points:
        return np.broadcast_to(np.arange(n_points), (len(rows), n_points))
    out = np.empty((len(rows), s_all), dtype=np.int64)
    for j, row in enumerate(rows):
        if matched.is_thing[row]:
            obj = matched.segments[matched.assignment[row]]
            k = min(s_th, len(obj), s_all)
            chosen = rng.choice(obj, size=k, replace=False)
            free = np.ones(n_points, dtype=bool)
            free[chosen] = False
            extra = rng.choice(np.flatnonzero(free), size=s_all - k, replace=False)
            out[j] = np.sort(np.concatenate([chosen, extra]))
        else:
            out[j] = np.sort(rng.choice(n_points, size=s_all, replace=False))
    return out


def dice_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``1 - 2 sum(p y) / (sum(p) + sum(y))`` along the last axis."""
    return 1 - 2 * (p * y).sum(-1) / (p.sum(-1) + y.sum(-1))


def mask_targets(matched: MatchedMasks, n_points: int) -> np.ndarray:
    """Binary ground-truth mask of every matched row, ``(n_rows, n_points)``."""
    rows = matched.matched_rows
    y = np.zeros((len(rows), n_points))
    for j, row in enumerate(rows):
        y[j, matched.segments[matched.assignment[row]]] = 1.0
    return y


def mask_loss(
    masks,
    matched: MatchedMasks,
    s_th: int,
    s_all: int,
    rng: np.random.Generator | None = None,
    from_logits: bool = False,
    samples=None,
) -> torch.Tensor:
    """Deep-supervised BCE + Dice over the matched rows of every block.

    ``masks`` holds one ``(n_queries, n_points)`` tensor per decoder block,
    probabilities by default or logits with ``from_logits``. The same point
    sample is used for a row in every block.
    """
    rows = matched.matched_rows
    if len(rows) == 0 or not masks:
        log.warning("mask loss: no matched query rows")
        ref = masks[0] if masks else torch.zeros(())
        return ref.sum() * 0.0
    n_points = masks[0].shape[1]
    if samples is None:
        samples = sample_points(matched, n_points, s_th, s_all, rng or np.random.default_rng(0))
    samples = np.asarray(samples)
    y_np = np.take_along_axis(mask_targets(matched, n_points), samples, axis=1)
    row_idx = torch.as_tensor(rows)[:, None]
    col_idx = torch.as_tensor(np.array(samples))  # broadcast samples are read-only views
    total = 0.0
    for m in masks:
        y = torch.as_tensor(y_np, dtype=m.dtype)
        v = m[row_idx, col_idx]
        if from_logits:
            bce = F.binary_cross_entropy_with_logits(v, y, reduction="none").mean(-1)
            p = torch.sigmoid(v)
        else:
            q = v.clamp(PROB_EPS, 1 - PROB_EPS)
            bce = -(y * torch.log(q) + (1 - y) * torch.log(1 - q)).mean(-1)
            p = v
        total = total + (bce + dice_loss(p, y)).mean()
    return total


def semantic_loss(logits: torch.Tensor, semantic) -> torch.Tensor:
    return F.cross_entropy(logits, torch.as_tensor(semantic, dtype=torch.long))
