"""Duplicate-mask fusion and per-point panoptic assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .queries import QuerySet


@dataclass(eq=False)
class PanopticLabeling:
    semantic: np.ndarray
    instance: np.ndarray
    query_index: np.ndarray  # winning query per point, -1 for the semantic fallback
    score: np.ndarray

    def validate(self, n_things: int) -> "PanopticLabeling":
        thing = self.semantic < n_things
        if np.any(thing != (self.instance > 0)):
            raise ValidationError("instance ids must be positive exactly on thing points")
        ids = np.unique(self.instance[self.instance > 0])
        if not np.array_equal(ids, np.arange(1, len(ids) + 1)):
            raise ValidationError("instance ids are not dense from 1")
        return self


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def _fuse_once(masks: np.ndarray, classes: np.ndarray, is_thing: np.ndarray, iou_thresh: float):
    binary = masks >= 0.5
    support = binary.sum(1)
    scores = np.where(support > 0, (masks * binary).sum(1) / np.maximum(support, 1), 0.0)
    masks, binary = masks.copy(), binary.copy()
    keep = np.ones(len(masks), dtype=bool)
    for cls in np.unique(classes[is_thing]):
        rows = np.flatnonzero(is_thing & (classes == cls))
        rows = rows[np.lexsort((rows, -scores[rows]))]
        accepted = []
        for r in rows:
            ious = [_iou(binary[a], binary[r]) for a in accepted]
            best = int(np.argmax(ious)) if ious else -1
            if best >= 0 and ious[best] >= iou_thresh:
                a = accepted[best]
                binary[a] |= binary[r]
                masks[a] = np.maximum(masks[a], masks[r])
                keep[r] = False
            else:
                accepted.append(r)
    return masks, keep


def fuse_masks(masks, query_set: QuerySet, iou_thresh: float = 0.5):
    """Merge same-class thing masks whose binary supports overlap by ``iou_thresh``.

    Repeats until no pair qualifies, so the result is a fixed point.
    Returns ``(masks, query_set, kept_rows)``; ``kept_rows`` indexes the input.
    """
    masks = np.asarray(masks, dtype=np.float64)
    classes, is_thing = query_set.classes(), query_set.is_thing()
    rows = np.arange(len(masks))
    while len(masks):
        fused, keep = _fuse_once(masks, classes, is_thing, iou_thresh)
        masks, classes, is_thing, rows = fused[keep], classes[keep], is_thing[keep], rows[keep]
        if keep.all():
            break
    queries = query_set.queries
    kept = [queries[i] for i in rows]
    out = QuerySet([q for q in kept if q.kind == "thing"], [q for q in kept if q.kind != "thing"])
    return masks, out, rows


def assemble(masks, query_set: QuerySet, fallback_logits, n_things: int) -> PanopticLabeling:
    """Per-point argmax over soft masks with a semantic fallback below 0.5.

    The fallback uses the best stuff class of ``fallback_logits``
    (``(n_points, n_classes)``), since a thing label needs an instance.
    """
    fallback_logits = np.asarray(fallback_logits)
    n_points = fallback_logits.shape[0]
    fallback = n_things + np.argmax(fallback_logits[:, n_things:], axis=1)
    semantic = fallback.astype(np.int64)
    instance = np.zeros(n_points, dtype=np.int64)
    winner = np.full(n_points, -1, dtype=np.int64)
    score = np.zeros(n_points)
    if len(query_set):
        masks = np.asarray(masks, dtype=np.float64)
        best = np.argmax(masks, axis=0)
        value = masks[best, np.arange(n_points)]
        ok = value >= 0.5
        winner[ok] = best[ok]
        score[ok] = value[ok]
        classes, is_thing = query_set.classes(), query_set.is_thing()
        semantic[ok] = classes[best[ok]]
        next_id = 1
        for q in np.unique(winner[ok]):
            if is_thing[q]:
                instance[winner == q] = next_id
                next_id += 1
    return PanopticLabeling(semantic, instance, winner, score)
