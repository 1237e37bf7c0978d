"""Slow, obviously-correct reference implementations."""
import math

import numpy as np
from scipy.optimize import linear_sum_assignment


def brute_force_v2p(centers, feats, query, k, eps=1e-8):
    """All-pairs reference: sort every centre by (distance, index)."""
    out = np.zeros((len(query), feats.shape[1]))
    k = min(k, len(centers))
    for i, q in enumerate(query):
        d = np.sqrt(((q[None, :] - centers) ** 2).sum(-1))
        order = np.lexsort((np.arange(len(centers)), d))[:k]
        inv = [1.0 / (d[j] + eps) for j in order]
        total = inv[0]
        for v in inv[1:]:
            total = total + v
        acc = (inv[0] / total) * feats[order[0]]
        for v, j in zip(inv[1:], order[1:]):
            acc = acc + (v / total) * feats[j]
        out[i] = acc
    return out


def brute_force_pq(pred_sem, pred_inst, gt_sem, gt_inst, n_things, n_classes):
    """All-pairs IoU table and an exhaustive optimal matching per class."""
    def segments(sem, inst):
        segs = {}
        for i, (s, k) in enumerate(zip(sem, inst)):
            key = (int(s), int(k) if s < n_things else 0)
            segs.setdefault(key, set()).add(i)
        return segs

    gt, pr = segments(gt_sem, gt_inst), segments(pred_sem, pred_inst)
    out = {}
    for c in range(n_classes):
        g = [v for k, v in sorted(gt.items()) if k[0] == c]
        p = [v for k, v in sorted(pr.items()) if k[0] == c]
        iou = np.zeros((len(g), len(p)))
        for i, gs in enumerate(g):
            for j, ps in enumerate(p):
                iou[i, j] = len(gs & ps) / len(gs | ps)
        ious = []
        if g and p:
            rows, cols = linear_sum_assignment(-(iou > 0.5).astype(float))
            ious = [iou[r, k] for r, k in zip(rows, cols) if iou[r, k] > 0.5]
        tp = len(ious)
        out[c] = (tp, len(p) - tp, len(g) - tp, math.fsum(ious))
    return out
