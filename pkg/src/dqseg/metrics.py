"""Panoptic quality (PQ, SQ, RQ, PQ-dagger) with things/stuff breakdown.

A predicted and a ground-truth segment of the same class match when their
IoU exceeds 0.5; at that threshold the match is unique, so no assignment
search is needed. Dataset-level numbers pool TP/FP/FN counts and IoU sums
over scenes before taking ratios.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import LabeledPointCloud, LabelTaxonomy, read_cloud, read_prediction
from .errors import ContractError, ValidationError


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ious: list = field(default_factory=list)

    def add(self, other: "ClassStats") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.ious.extend(other.ious)

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def iou_sum(self) -> float:
        return math.fsum(self.ious)

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fn + 0.5 * self.fp
        return self.tp / denom if denom else 0.0

    @property
    def pq(self) -> float:
        return self.sq * self.rq


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


@dataclass
class PanopticReport:
    taxonomy: LabelTaxonomy
    stats: dict[int, ClassStats]

    def _present(self, things: bool | None = None):
        n_th = self.taxonomy.n_things
        for c, s in sorted(self.stats.items()):
            if s.present and (things is None or (c < n_th) == things):
                yield c, s

    def _agg(self, attr, things=None) -> float:
        return _mean(getattr(s, attr) for _, s in self._present(things))

    @property
    def pq(self):
        return self._agg("pq")

    @property
    def sq(self):
        return self._agg("sq")

    @property
    def rq(self):
        return self._agg("rq")

    @property
    def pq_dagger(self):
        n_th = self.taxonomy.n_things
        return _mean(s.pq if c < n_th else s.sq for c, s in self._present())

    pq_th = property(lambda self: self._agg("pq", True))
    sq_th = property(lambda self: self._agg("sq", True))
    rq_th = property(lambda self: self._agg("rq", True))
    pq_st = property(lambda self: self._agg("pq", False))
    sq_st = property(lambda self: self._agg("sq", False))
    rq_st = property(lambda self: self._agg("rq", False))

    def class_report(self, c: int) -> dict:
        s = self.stats[c]
        return {"PQ": s.pq, "SQ": s.sq, "RQ": s.rq, "TP": s.tp, "FP": s.fp, "FN": s.fn, "mean_IoU_TP": s.sq}

    def summary(self) -> dict:
        return {
            "PQ": self.pq, "PQ_dagger": self.pq_dagger, "RQ": self.rq, "SQ": self.sq,
            "PQ_Th": self.pq_th, "RQ_Th": self.rq_th, "SQ_Th": self.sq_th,
            "PQ_St": self.pq_st, "RQ_St": self.rq_st, "SQ_St": self.sq_st,
        }  # fmt: skip

    def to_json(self) -> dict:
        """Scores as percentages rounded to one decimal; counts as integers."""
        pct = lambda v: round(100 * v, 1)
        classes = {}
        for c, s in self._present():
            r = self.class_report(c)
            classes[self.taxonomy.names[c]] = {k: (v if k in ("TP", "FP", "FN") else pct(v)) for k, v in r.items()}
        return {**{k: pct(v) for k, v in self.summary().items()}, "classes": classes}

    def merge(self, other: "PanopticReport") -> "PanopticReport":
        stats = {c: ClassStats() for c in range(self.taxonomy.n_classes)}
        for rep in (self, other):
            for c, s in rep.stats.items():
                stats[c].add(s)
        return PanopticReport(self.taxonomy, stats)


def _segments(semantic: np.ndarray, instance: np.ndarray, n_things: int) -> np.ndarray:
    inst = np.where(semantic < n_things, instance, 0)
    return semantic.astype(np.int64) * (int(inst.max(initial=0)) + 1) + inst, int(inst.max(initial=0)) + 1


def evaluate(pred_semantic, pred_instance, gt: LabeledPointCloud, taxonomy: LabelTaxonomy, ignore_class=None):
    """Per-class panoptic statistics of one scene.

    ``pred_semantic``/``pred_instance`` may also be given as a single
    object with ``semantic`` and ``instance`` attributes (pass ``None`` for
    ``pred_instance``). Points whose ground-truth class is ``ignore_class``
    are dropped before any IoU is computed.
    """
    if pred_instance is None:
        pred_semantic, pred_instance = pred_semantic.semantic, pred_semantic.instance
    ps, pi = np.asarray(pred_semantic, dtype=np.int64), np.asarray(pred_instance, dtype=np.int64)
    if ps.shape != (len(gt),) or pi.shape != (len(gt),):
        raise ContractError(f"prediction covers {ps.shape[0]} points, ground truth has {len(gt)}")
    taxonomy.check_cloud(gt)
    gs, gi = gt.semantic, gt.instance
    if ignore_class is not None:
        keep = gs != ignore_class
        ps, pi, gs, gi = ps[keep], pi[keep], gs[keep], gi[keep]
    n_th = taxonomy.n_things
    g_seg, g_mul = _segments(gs, gi, n_th)
    p_seg, p_mul = _segments(ps, pi, n_th)
    g_ids, g_area = np.unique(g_seg, return_counts=True)
    p_ids, p_area = np.unique(p_seg, return_counts=True)
    pairs, inter = np.unique(np.stack([g_seg, p_seg], 1), axis=0, return_counts=True)

    g_area_of = dict(zip(g_ids.tolist(), g_area.tolist()))
    p_area_of = dict(zip(p_ids.tolist(), p_area.tolist()))
    stats = {c: ClassStats() for c in range(taxonomy.n_classes)}
    matched_g, matched_p = set(), set()
    for (g, p), n in zip(pairs.tolist(), inter.tolist()):
        if g // g_mul != p // p_mul:
            continue
        iou = n / (g_area_of[g] + p_area_of[p] - n)
        if iou > 0.5:
            s = stats[g // g_mul]
            s.tp += 1
            s.ious.append(iou)
            matched_g.add(g)
            matched_p.add(p)
    for g in g_ids.tolist():
        if g not in matched_g:
            stats[g // g_mul].fn += 1
    for p in p_ids.tolist():
        if p not in matched_p:
            c = p // p_mul
            if c not in stats:
                raise ValidationError(f"predicted class {c} outside the taxonomy")
            stats[c].fp += 1
    return PanopticReport(taxonomy, stats)


def prediction_path(pred_dir, scene_path) -> Path:
    return Path(pred_dir) / (Path(scene_path).stem + ".dqpr")


def evaluate_dataset(pred_dir, manifest_path, taxonomy: LabelTaxonomy, ignore_class=None):
    """Pooled report over every manifest scene plus the per-scene reports."""
    from .synth import load_manifest

    root, entries = load_manifest(manifest_path)
    total = PanopticReport(taxonomy, {c: ClassStats() for c in range(taxonomy.n_classes)})
    per_scene = []
    for entry in entries:
        path = prediction_path(pred_dir, entry["path"])
        if not path.exists():
            raise FileNotFoundError(f"missing prediction for scene {entry['path']}: {path}")
        gt = read_cloud(root / entry["path"])
        _, sem, inst = read_prediction(path)
        rep = evaluate(sem, inst, gt, taxonomy, ignore_class)
        per_scene.append(rep)
        total = total.merge(rep)
    return total, per_scene


def write_report(path, report: PanopticReport, per_scene=None, extra=None) -> None:
    doc = report.to_json()
    if per_scene is not None:
        doc["scenes"] = [r.to_json() for r in per_scene]
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
