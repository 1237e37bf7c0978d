"""Procedural LiDAR-like scenes: compact thing instances on scene-wide stuff.

Every scene is a pure function of ``(recipe, seed)``. Things are placed with
rejection sampling on their yaw-rotated bird's-eye-view bounding boxes so
that footprints never overlap each other or the stuff structures.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import DEFAULT_TAXONOMY, LabeledPointCloud, LabelTaxonomy, write_cloud
from .errors import CapacityError, ValidationError

log = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class ThingShape:
    """Geometry of one thing class.

    ``kind`` is ``"box"`` (length x width x height) or ``"cylinder"``
    (radius, radius, height); dimension ranges are sampled uniformly.
    """

    kind: str
    dims_min: tuple[float, float, float]
    dims_max: tuple[float, float, float]
    intensity: float = 0.5


DEFAULT_SHAPES = (
    ThingShape("box", (3.6, 1.6, 1.4), (4.6, 2.0, 1.8), intensity=0.8),
    ThingShape("cylinder", (0.25, 0.25, 1.6), (0.35, 0.35, 1.9), intensity=0.35),
    ThingShape("cylinder", (0.08, 0.08, 2.8), (0.12, 0.12, 3.4), intensity=0.6),
)


@dataclass(frozen=True)
class SceneRecipe:
    seed: int = 0
    range_xy: float = 12.8
    n_things: tuple[tuple[int, int], ...] = ((2, 4), (2, 4), (2, 4))
    shapes: tuple[ThingShape, ...] = DEFAULT_SHAPES
    points_per_thing: tuple[int, int] = (80, 240)
    stuff_density: float = 9.0
    n_walls: tuple[int, int] = (1, 2)
    n_hedges: tuple[int, int] = (1, 2)
    dropout: float = 0.1
    noise_sigma: float = 0.02
    ground_z: float = 0.0

    def validate(self, taxonomy: LabelTaxonomy) -> None:
        if self.range_xy <= 0:
            raise ValidationError("range_xy must be positive")
        if self.stuff_density <= 0:
            raise ValidationError("stuff_density must be positive")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        if len(self.n_things) != taxonomy.n_things or len(self.shapes) != taxonomy.n_things:
            raise ValidationError(
                f"recipe describes {len(self.n_things)} thing classes, taxonomy has {taxonomy.n_things}"
            )
        lo, hi = self.points_per_thing
        if not 10 <= lo <= hi:
            raise ValidationError("points_per_thing must satisfy 10 <= min <= max")
        for a, b in self.n_things:
            if not 0 <= a <= b:
                raise ValidationError("n_things ranges must satisfy 0 <= min <= max")


class _Footprints:
    """Axis-aligned BEV boxes already claimed in the scene."""

    def __init__(self):
        self.boxes: list[tuple[float, float, float, float]] = []

    def free(self, box, margin=0.3) -> bool:
        x0, y0, x1, y1 = box
        for a0, b0, a1, b1 in self.boxes:
            if x0 < a1 + margin and a0 < x1 + margin and y0 < b1 + margin and b0 < y1 + margin:
                return False
        return True

    def add(self, box):
        self.boxes.append(box)


def _rot(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _box_surface(rng, n, length, width, height):
    """Uniform samples on the five visible faces of a box centred at the origin."""
    faces = np.array([length * width, length * height, length * height, width * height, width * height])
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u, v = rng.random(n), rng.random(n)
    x = (u - 0.5) * length
    y = (v - 0.5) * width
    z = np.where(face == 0, height, v * height)
    x = np.where(face == 3, -0.5 * length, np.where(face == 4, 0.5 * length, x))
    y = np.where(face == 1, -0.5 * width, np.where(face == 2, 0.5 * width, y))
    y = np.where(face >= 3, (u - 0.5) * width, y)
    return np.stack([x, y, z], axis=1)


def _cylinder_surface(rng, n, radius, height):
    theta = rng.random(n) * 2 * np.pi
    z = rng.random(n) * height
    return np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)


def _aabb(corners_xy):
    return (*corners_xy.min(axis=0), *corners_xy.max(axis=0))


def _keep(rng, n, dropout, minimum=0):
    """Bernoulli survival mask with at least ``minimum`` survivors."""
    for _ in range(100):
        keep = rng.random(n) >= dropout
        if keep.sum() >= minimum:
            return keep
    keep = np.zeros(n, dtype=bool)
    keep[:minimum] = True
    return keep


def synthesize_scene(recipe: SceneRecipe, taxonomy: LabelTaxonomy = DEFAULT_TAXONOMY) -> LabeledPointCloud:
    recipe.validate(taxonomy)
    rng = np.random.default_rng(recipe.seed)
    r = recipe.range_xy
    taken = _Footprints()
    parts: list[tuple[np.ndarray, np.ndarray, int, int]] = []  # xyz, intensity, semantic, instance

    # Stuff structures first; things avoid them.
    n_stuff = taxonomy.n_stuff
    if n_stuff > 1:
        for _ in range(rng.integers(recipe.n_walls[0], recipe.n_walls[1] + 1)):
            length = rng.uniform(0.3 * r, 0.8 * r)
            height = rng.uniform(2.5, 3.2)
            horizontal = rng.random() < 0.5
            along = rng.uniform(-r + 1, r - 1 - length)
            across = rng.choice([-1.0, 1.0]) * rng.uniform(0.6 * r, 0.9 * r)
            if horizontal:
                box = (along, across - 0.15, along + length, across + 0.15)
            else:
                box = (across - 0.15, along, across + 0.15, along + length)
            if not taken.free(box, margin=1.0):
                continue
            taken.add(box)
            n = rng.poisson(recipe.stuff_density * 3.0 * length * height)
            t, z = rng.random(n) * length, rng.random(n) * height
            off = rng.normal(0, 0.05, n)
            pts = (
                np.stack([along + t, across + off, z], 1) if horizontal else np.stack([across + off, along + t, z], 1)
            )
            parts.append((pts, np.full(n, 0.2), taxonomy.stuff_id(1), 0))
    if n_stuff > 2:
        for _ in range(rng.integers(recipe.n_hedges[0], recipe.n_hedges[1] + 1)):
            length, width = rng.uniform(min(4.0, 0.3 * r), 0.6 * r), rng.uniform(1.0, 1.6)
            height = rng.uniform(0.8, 1.4)
            cx, cy = rng.uniform(-r + length / 2 + 0.5, r - length / 2 - 0.5, size=2)
            horizontal = rng.random() < 0.5
            half = np.array([length, width]) / 2 if horizontal else np.array([width, length]) / 2
            box = (cx - half[0], cy - half[1], cx + half[0], cy + half[1])
            if not taken.free(box, margin=1.0):
                continue
            taken.add(box)
            n = rng.poisson(recipe.stuff_density * 6.0 * length * width)
            u = rng.uniform(-1, 1, size=(n, 2)) * half
            # a rounded, bumpy volume so the class has its own texture
            z = height * np.sqrt(np.clip(1 - (u / half) ** 2, 0, 1)).min(axis=1) * rng.uniform(0.5, 1.0, n)
            pts = np.stack([cx + u[:, 0], cy + u[:, 1], z], 1)
            parts.append((pts, np.full(n, 0.5), taxonomy.stuff_id(2), 0))
    for extra in range(3, n_stuff):
        # Additional stuff classes become flat patches raised slightly above ground.
        size = rng.uniform(2.0, 4.0, size=2)
        cx, cy = rng.uniform(-r + 2, r - 2, size=2)
        box = (cx - size[0] / 2, cy - size[1] / 2, cx + size[0] / 2, cy + size[1] / 2)
        if not taken.free(box, margin=1.0):
            continue
        taken.add(box)
        n = rng.poisson(recipe.stuff_density * size[0] * size[1])
        u = rng.uniform(-0.5, 0.5, size=(n, 2)) * size
        pts = np.stack([cx + u[:, 0], cy + u[:, 1], np.full(n, 0.15 * extra)], 1)
        parts.append((pts, np.full(n, (0.1 + 0.1 * extra) % 0.8), taxonomy.stuff_id(extra), 0))

    # Things.
    things = []
    instance = 0
    for cls in range(taxonomy.n_things):
        lo, hi = recipe.n_things[cls]
        count = int(rng.integers(lo, hi + 1))
        shape = recipe.shapes[cls]
        for _ in range(count):
            for _try in range(MAX_PLACEMENT_TRIES):
                dims = rng.uniform(shape.dims_min, shape.dims_max)
                yaw = rng.uniform(0, np.pi)
                half = dims[0] if shape.kind == "cylinder" else None
                cx, cy = rng.uniform(-r + 0.5, r - 0.5, size=2)
                if shape.kind == "box":
                    corners = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]]) * dims[:2] / 2
                    corners = corners @ _rot(yaw).T + [cx, cy]
                else:
                    corners = np.array([[-half, -half], [half, half]]) + [cx, cy]
                box = _aabb(corners)
                inside = box[0] >= -r and box[1] >= -r and box[2] < r and box[3] < r
                if inside and taken.free(box):
                    break
            else:
                raise CapacityError(
                    f"could not place {count} objects of class {taxonomy.thing_classes[cls]!r} "
                    f"after {MAX_PLACEMENT_TRIES} tries per object"
                )
            taken.add(box)
            instance += 1
            things.append(box)
            n = int(rng.integers(recipe.points_per_thing[0], recipe.points_per_thing[1] + 1))
            if shape.kind == "box":
                local = _box_surface(rng, n, *dims)
            else:
                local = _cylinder_surface(rng, n, dims[0], dims[2])
            local[:, :2] = local[:, :2] @ _rot(yaw).T
            pts = local + [cx, cy, recipe.ground_z]
            inten = np.clip(shape.intensity + rng.normal(0, 0.05, n), 0, 1)
            parts.append((pts, inten, cls, instance))

    # Ground last: skip the area under things.
    area = (2 * r) ** 2
    n = rng.poisson(recipe.stuff_density * area)
    xy = rng.uniform(-r, r, size=(n, 2))
    under = np.zeros(n, dtype=bool)
    for x0, y0, x1, y1 in things:
        under |= (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)
    xy = xy[~under]
    parts.insert(0, (np.column_stack([xy, np.full(len(xy), recipe.ground_z)]), np.full(len(xy), 0.1), taxonomy.stuff_id(0), 0))

    positions, intensity, semantic, inst = [], [], [], []
    for pts, inten, cls, iid in parts:
        n = len(pts)
        minimum = 10 if iid > 0 else 0
        keep = _keep(rng, n, recipe.dropout, minimum)
        noisy = pts + rng.normal(0, recipe.noise_sigma, size=pts.shape)
        inten = np.clip(np.asarray(inten, dtype=float) + rng.normal(0, 0.02, n), 0, 1)
        positions.append(noisy[keep])
        intensity.append(inten[keep])
        semantic.append(np.full(keep.sum(), cls))
        inst.append(np.full(keep.sum(), iid))
    positions = np.concatenate(positions)
    # Keep every point strictly inside the horizontal range.
    positions[:, :2] = np.clip(positions[:, :2], -r + 1e-3, r - 1e-3)
    cloud = LabeledPointCloud(
        positions,
        np.concatenate(intensity),
        np.concatenate(semantic),
        np.concatenate(inst),
        taxonomy.n_things,
        taxonomy.n_stuff,
    )
    return cloud.validate()


def synthesize_dataset(recipe: SceneRecipe, taxonomy: LabelTaxonomy, count: int, out_dir) -> list[dict]:
    """Write ``count`` scenes (seeds ``recipe.seed + i``) plus ``manifest.json``.

    Manifest paths are relative to ``out_dir``.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise OSError(f"output directory does not exist: {out_dir}")
    manifest = []
    for i in range(count):
        seed = recipe.seed + i
        try:
            cloud = synthesize_scene(replace(recipe, seed=seed), taxonomy)
        except CapacityError as exc:
            raise CapacityError(f"scene {i}: {exc}") from exc
        name = f"scene_{i:04d}.dqpc"
        write_cloud(cloud, out_dir / name)
        manifest.append(
            {"path": name, "seed": seed, "n_points": len(cloud), "n_instances": int(len(cloud.instance_ids()))}
        )
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    log.info("wrote %d scenes to %s", count, out_dir)
    return manifest


def load_manifest(path) -> tuple[Path, list[dict]]:
    """Return ``(root, entries)`` where entry paths resolve against ``root``."""
    path = Path(path)
    with open(path) as fh:
        entries = json.load(fh)
    return path.parent, entries
