import pytest

from dqseg.config import PRESETS, RunConfig, parse_assignments, toy_config
from dqseg.errors import ValidationError


def test_round_trip(tmp_path):
    cfg = toy_config(n_queries=7, thing_classes=["car", "bike"])
    cfg.dump(tmp_path / "c.cfg")
    assert RunConfig.load(tmp_path / "c.cfg") == cfg
    assert RunConfig.loads(cfg.dumps()) == cfg


def test_unknown_key_rejected():
    with pytest.raises(ValidationError, match="nope"):
        RunConfig.loads("nope = 3")


def test_bad_values_rejected():
    with pytest.raises(ValidationError):
        RunConfig(n_queries=0).validate()
    with pytest.raises(ValidationError):
        RunConfig(s_th=5000, s_all=100).validate()


def test_assignments_parse_json_values():
    assert parse_assignments(["# note", "", "lr = 1e-3", 'thing_classes = ["a"]']) == {"lr": 1e-3, "thing_classes": ["a"]}
    with pytest.raises(ValidationError, match="line 1"):
        parse_assignments(["lr = oops"])


def test_presets_and_derived_objects():
    assert set(PRESETS) == {"default", "toy"}
    cfg = toy_config()
    assert (cfg.embed_dim, cfg.n_queries, cfg.n_blocks, cfg.epochs) == (32, 20, 3, 200)
    assert cfg.grid_spec.dense_dims == (128, 128, 22)
    assert cfg.taxonomy.n_things == 3
    assert cfg.recipe(11).seed == 11
    default = RunConfig()
    assert (default.n_queries, default.theta_th, default.theta_st, default.lr) == (150, 0.85, 0.5, 1e-4)
