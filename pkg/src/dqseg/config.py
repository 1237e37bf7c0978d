"""Flat run configuration with a TOML-compatible ``key = value`` text format.

Values are JSON literals (numbers, ``true``/``false``, quoted strings, lists),
which is the subset of TOML this file format accepts.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .cloud import LabelTaxonomy
from .errors import ValidationError
from .synth import SceneRecipe
from .voxel import VoxelGridSpec


@dataclass
class RunConfig:
    seed: int = 0
    thing_classes: list = field(default_factory=lambda: ["car", "pedestrian", "pole"])
    stuff_classes: list = field(default_factory=lambda: ["ground", "building", "vegetation"])

    # voxel grid
    xy_range: float = 12.8
    z_min: float = -1.0
    z_max: float = 3.4
    voxel_size: float = 0.1
    use_range_feature: bool = True
    knn_k: int = 3

    # network
    base_channels: int = 32
    embed_dim: int = 64
    bev_voxel_channels: int = 8
    n_blocks: int = 3
    n_heads: int = 1
    ffn_mult: int = 4
    decoder_levels: list = field(default_factory=lambda: [0, 1, 2])
    attn_mask_threshold: float = 0.5
    pe_min_wavelength: float = 2.0
    query_pos_encoding: bool = True

    # query generation
    n_queries: int = 150
    theta_th: float = 0.85
    theta_st: float = 0.5
    window_m: float = 1.0
    peak_filter: bool = True
    thing_score_thresh: float = 0.3

    # inference
    iou_thresh: float = 0.5

    # training
    epochs: int = 80
    lr: float = 1e-4
    lr_decay_at: float = 0.75
    lr_decay: float = 0.1
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    r_match: float = 1.0
    s_th: int = 100
    s_all: int = 2000
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    w_hm: float = 1.0
    w_mask: float = 1.0
    w_sem: float = 1.0
    augment_rotate: bool = True
    augment_scale: bool = True
    augment_flip: bool = True
    eval_every: int = 10

    # scene synthesis
    synth_stuff_density: float = 9.0
    synth_points_per_thing: list = field(default_factory=lambda: [80, 240])
    synth_dropout: float = 0.1
    synth_noise: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        for f in fields(self):
            value = getattr(self, f.name)
            expected = _TYPES[f.name]
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
                setattr(self, f.name, value)
            if expected is list and isinstance(value, tuple):
                value = list(value)
                setattr(self, f.name, value)
            if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
                raise ValidationError(f"{f.name}: expected {expected.__name__}, got {value!r}")
        checks = [
            (self.voxel_size > 0, "voxel_size must be positive"),
            (self.xy_range > 0 and self.z_max > self.z_min, "empty grid range"),
            (self.embed_dim >= 8, "embed_dim must be >= 8"),
            (self.n_blocks >= 1 and len(self.decoder_levels) == self.n_blocks, "decoder_levels needs one entry per block"),
            (all(0 <= lv < 4 for lv in self.decoder_levels), "decoder_levels must index the 4 encoder levels"),
            (self.embed_dim % self.n_heads == 0, "embed_dim must be divisible by n_heads"),
            (self.n_queries >= 1, "n_queries must be >= 1"),
            (self.theta_th > 0, "theta_th must be positive (values > 1 disable query fusion)"),
            (0 < self.theta_st < 1, "theta_st must lie in (0, 1)"),
            (self.window_m > 0, "window_m must be positive"),
            (0 < self.iou_thresh <= 1, "iou_thresh must lie in (0, 1]"),
            (self.epochs >= 1 and self.lr > 0, "epochs and lr must be positive"),
            (1 <= self.s_th <= self.s_all, "need 1 <= s_th <= s_all"),
            (self.r_match > 0, "r_match must be positive"),
            (self.knn_k >= 1, "knn_k must be >= 1"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)
        LabelTaxonomy(tuple(self.thing_classes), tuple(self.stuff_classes))
        return self

    @property
    def taxonomy(self) -> LabelTaxonomy:
        return LabelTaxonomy(tuple(self.thing_classes), tuple(self.stuff_classes))

    @property
    def grid_spec(self) -> VoxelGridSpec:
        return VoxelGridSpec.from_range(self.xy_range, (self.z_min, self.z_max), self.voxel_size)

    def recipe(self, seed: int | None = None) -> SceneRecipe:
        n = len(self.thing_classes)
        default = SceneRecipe()
        return SceneRecipe(
            seed=self.seed if seed is None else seed,
            range_xy=self.xy_range,
            n_things=(default.n_things * n)[:n],
            shapes=(default.shapes * n)[:n],
            points_per_thing=tuple(self.synth_points_per_thing),
            stuff_density=self.synth_stuff_density,
            dropout=self.synth_dropout,
            noise_sigma=self.synth_noise,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_TYPES)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **changes})

    def dumps(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {} if base is None else base.to_dict()
        if text.lstrip().startswith("{"):
            try:
                values.update(json.loads(text))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"invalid JSON config: {exc.msg}") from exc
        else:
            values.update(parse_assignments(text.splitlines()))
        return cls.from_dict(values)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read(), base)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())


_TYPES = {f.name: {"int": int, "float": float, "bool": bool, "list": list}[f.type] for f in fields(RunConfig)}


def parse_assignments(lines) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"line {n}: expected 'key = value', got {raw!r}")
        key = key.strip()
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {n}: cannot parse value for {key!r}: {exc.msg}") from exc
    return out


def toy_config(**overrides) -> RunConfig:
    """Small CPU configuration used by the overfit experiment."""
    base = dict(
        seed=7,
        voxel_size=0.2,
        embed_dim=32,
        base_channels=16,
        bev_voxel_channels=2,
        n_queries=20,
        epochs=200,
        lr=2e-3,
        augment_rotate=False,
        augment_scale=False,
        augment_flip=False,
        eval_every=50,
    )
    base.update(overrides)
    return RunConfig(**base)


PRESETS = {"default": RunConfig, "toy": toy_config}
