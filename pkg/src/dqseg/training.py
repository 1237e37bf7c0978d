"""Loss assembly, the optimisation loop, and checkpointing of training runs."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    load_model_blobs,
    load_optimizer_blobs,
    model_blobs,
    optimizer_blobs,
    read_checkpoint,
    write_checkpoint,
)
from .cloud import LabeledPointCloud, read_cloud
from .config import RunConfig
from .encoder import SceneGeometry
from .errors import EmptySceneError, NumericError, ValidationError
from .losses import heatmap_loss, mask_loss, semantic_loss
from .metrics import ClassStats, PanopticReport, evaluate
from .model import ForwardOutput, PanopticModel
from .synth import load_manifest
from .targets import build_center_targets, build_stuff_targets, match_predictions

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_hm", "L_mask", "L_sem")


@dataclass
class PreparedScene:
    name: str
    cloud: LabeledPointCloud
    geom: SceneGeometry
    center_targets: list[torch.Tensor]
    stuff_targets: list[torch.Tensor]


def prepare_scene(model: PanopticModel, cloud: LabeledPointCloud, name: str = "") -> PreparedScene:
    spec = model.spec
    geom = model.prepare(cloud)
    levels = range(spec.n_levels)
    dtype = model.dtype
    return PreparedScene(
        name,
        cloud,
        geom,
        [torch.as_tensor(build_center_targets(cloud, spec, i), dtype=dtype) for i in levels],
        [torch.as_tensor(build_stuff_targets(cloud, spec, i), dtype=dtype) for i in levels],
    )


def augment(cloud: LabeledPointCloud, cfg: RunConfig, rng: np.random.Generator) -> LabeledPointCloud:
    """Global yaw rotation, isotropic scaling and random axis flips."""
    p = cloud.positions.astype(np.float64)
    if cfg.augment_rotate:
        a = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        p[:, :2] = p[:, :2] @ np.array([[c, s], [-s, c]])
    if cfg.augment_scale:
        p *= rng.uniform(0.95, 1.05)
    if cfg.augment_flip:
        for axis in (0, 1):
            if rng.random() < 0.5:
                p[:, axis] = -p[:, axis]
    return LabeledPointCloud(p, cloud.intensity, cloud.semantic, cloud.instance, cloud.n_things, cloud.n_stuff)


def compute_losses(model: PanopticModel, scene: PreparedScene, out: ForwardOutput, rng) -> dict[str, torch.Tensor]:
    cfg = model.config
    levels = [
        (m.center_heatmap, yt, m.stuff_map, ys)
        for m, yt, ys in zip(out.maps, scene.center_targets, scene.stuff_targets)
    ]
    l_hm = heatmap_loss(levels, cfg.n_queries, cfg.focal_alpha, cfg.focal_beta)
    matched = match_predictions(out.query_set, scene.cloud, cfg.r_match)
    l_mask = mask_loss(out.mask_logits, matched, cfg.s_th, cfg.s_all, rng, from_logits=True)
    l_sem = semantic_loss(out.semantic_logits, scene.cloud.semantic)
    losses = {"L_hm": l_hm, "L_mask": l_mask, "L_sem": l_sem}
    for k, v in losses.items():
        if not torch.isfinite(v):
            raise NumericError(f"{k} is not finite in scene {scene.name!r}")
    losses["L"] = cfg.w_hm * l_hm + cfg.w_mask * l_mask + cfg.w_sem * l_sem
    return losses


def make_optimizer(model: PanopticModel) -> torch.optim.AdamW:
    cfg = model.config
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
        foreach=True,
    )


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    """Step schedule; ``epoch`` is 0-based."""
    return cfg.lr * (cfg.lr_decay if epoch >= math.floor(cfg.lr_decay_at * cfg.epochs) else 1.0)


def load_scenes(manifest_path) -> list[tuple[str, LabeledPointCloud]]:
    root, entries = load_manifest(manifest_path)
    return [(e["path"], read_cloud(root / e["path"])) for e in entries]


def evaluate_scenes(model: PanopticModel, scenes, **predict_kw) -> PanopticReport:
    tax = model.config.taxonomy
    total = PanopticReport(tax, {c: ClassStats() for c in range(tax.n_classes)})
    for s in scenes:
        labels, _ = model.predict(s.cloud, geom=s.geom, **predict_kw)
        total = total.merge(evaluate(labels.semantic, labels.instance, s.cloud, tax))
    return total


def save_run(path, model, optimizer, epoch: int, extra: dict | None = None) -> None:
    meta = {"config": model.config.to_dict(), "epoch": epoch, **(extra or {})}
    write_checkpoint(path, meta, {**model_blobs(model), **optimizer_blobs(model, optimizer)})


def load_model(path) -> tuple[PanopticModel, dict, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, meta, blobs)``."""
    meta, blobs = read_checkpoint(path)
    try:
        cfg = RunConfig.from_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"checkpoint {path} has no usable config") from exc
    model = PanopticModel(cfg)
    load_model_blobs(model, blobs)
    model.eval()
    return model, meta, blobs


def train(manifest_path, cfg: RunConfig, out_dir, resume=None, on_epoch=None):
    """Optimise all weights on the manifest scenes.

    Writes ``last.dqck`` every epoch, ``best.dqck`` whenever the pooled
    training PQ (checked every ``eval_every`` epochs and at the end)
    improves, and appends one JSON line per epoch to ``train_log.jsonl``.
    Returns ``(path of last.dqck, list of log records)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start_epoch, best_pq = 0, -1.0
    if resume is not None:
        model, meta, blobs = load_model(resume)
        # the schedule may be extended; everything else comes from the checkpoint
        schedule = {"epochs": cfg.epochs, "eval_every": cfg.eval_every}
        if model.config.replace(**schedule).to_dict() != cfg.to_dict():
            log.warning("resuming with the checkpoint's configuration, not the supplied one")
        cfg = model.config.replace(**schedule)
        model.config = cfg
        optimizer = make_optimizer(model)
        load_optimizer_blobs(model, optimizer, blobs)
        start_epoch, best_pq = int(meta["epoch"]), float(meta.get("best_pq", -1.0))
    else:
        model = PanopticModel(cfg)
        optimizer = make_optimizer(model)
    model.train()

    raw = load_scenes(manifest_path)
    if not raw:
        raise ValidationError("manifest lists no scenes")
    for name, cloud in raw:
        cfg.taxonomy.check_cloud(cloud)
    augmenting = cfg.augment_rotate or cfg.augment_scale or cfg.augment_flip
    static = {}
    if not augmenting:
        for name, cloud in raw:
            try:
                static[name] = prepare_scene(model, cloud, name)
            except EmptySceneError:
                log.warning("skipping empty scene %s", name)

    log_path = out_dir / "train_log.jsonl"
    if resume is None and log_path.exists():
        log_path.unlink()
    records = []
    last_path = out_dir / "last.dqck"
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = learning_rate(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        data_rng = np.random.default_rng([cfg.seed, 1, epoch])
        sample_rng = np.random.default_rng([cfg.seed, 2, epoch])
        sums = {k: 0.0 for k in (*LOSS_KEYS, "L")}
        steps = 0
        for i in data_rng.permutation(len(raw)):
            name, cloud = raw[i]
            if augmenting:
                try:
                    scene = prepare_scene(model, augment(cloud, cfg, data_rng), name)
                except EmptySceneError:
                    log.warning("skipping empty scene %s", name)
                    continue
            elif name in static:
                scene = static[name]
            else:
                continue
            out = model(scene.geom, training=True)
            losses = compute_losses(model, scene, out, sample_rng)
            optimizer.zero_grad(set_to_none=True)
            losses["L"].backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            for k in sums:
                sums[k] += float(losses[k].detach())
            steps += 1
        record = {k: sums[k] / max(steps, 1) for k in sums}
        record.update(epoch=epoch + 1, lr=lr, wall_time=time.perf_counter() - t0)
        final = epoch + 1 == cfg.epochs
        if (epoch + 1) % cfg.eval_every == 0 or final:
            model.eval()
            scenes = list(static.values()) or [prepare_scene(model, c, n) for n, c in raw]
            pq = evaluate_scenes(model, scenes).pq
            model.train()
            record["train_PQ"] = pq
            if pq > best_pq:
                best_pq = pq
                save_run(out_dir / "best.dqck", model, optimizer, epoch + 1, {"best_pq": best_pq})
        save_run(last_path, model, optimizer, epoch + 1, {"best_pq": best_pq})
        records.append(record)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d %s", epoch + 1, {k: round(v, 4) for k, v in record.items()})
        if on_epoch is not None:
            on_epoch(record)
    model.eval()
    return last_path, records
