import json
from dataclasses import replace

import numpy as np
import pytest

from dqseg.cloud import DEFAULT_TAXONOMY, read_cloud
from dqseg.errors import CapacityError, ValidationError
from dqseg.synth import SceneRecipe, synthesize_dataset, synthesize_scene


def test_deterministic():
    a = synthesize_scene(SceneRecipe(seed=11))
    b = synthesize_scene(SceneRecipe(seed=11))
    assert a == b
    assert not a == synthesize_scene(SceneRecipe(seed=12))


def test_no_things_gives_stuff_only():
    cloud = synthesize_scene(SceneRecipe(seed=1, n_things=((0, 0),) * 3))
    assert (cloud.instance == 0).all()
    assert (cloud.semantic >= 3).all()


def test_pigeonhole_capacity_error():
    recipe = SceneRecipe(seed=0, range_xy=5.0, n_things=((500, 500), (0, 0), (0, 0)))
    with pytest.raises(CapacityError, match="car"):
        synthesize_scene(recipe)


@pytest.mark.parametrize("seed", range(8))
def test_scene_invariants(seed):
    cloud = synthesize_scene(SceneRecipe(seed=seed))
    ids = cloud.instance_ids()
    np.testing.assert_array_equal(ids, np.arange(1, len(ids) + 1))
    for iid in ids:
        assert (cloud.instance == iid).sum() >= 10
    assert (cloud.semantic < 3).mean() < 0.5
    assert (cloud.semantic == 3).any()  # ground
    # footprints are pairwise disjoint in BEV
    boxes = []
    for iid in ids:
        xy = cloud.positions[cloud.instance == iid, :2]
        boxes.append((*xy.min(0), *xy.max(0)))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            assert a[2] < b[0] or b[2] < a[0] or a[3] < b[1] or b[3] < a[1]


def test_invalid_recipe():
    with pytest.raises(ValidationError):
        synthesize_scene(SceneRecipe(dropout=1.0))
    with pytest.raises(ValidationError):
        synthesize_scene(SceneRecipe(range_xy=0))


def test_dataset(tmp_path):
    manifest = synthesize_dataset(SceneRecipe(seed=5), DEFAULT_TAXONOMY, 3, tmp_path)
    assert len(manifest) == 3
    assert [m["seed"] for m in manifest] == [5, 6, 7]
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == manifest
    for m in manifest:
        cloud = read_cloud(tmp_path / m["path"])
        assert len(cloud) == m["n_points"]
        assert len(cloud.instance_ids()) == m["n_instances"]
    first = {m["path"]: (tmp_path / m["path"]).read_bytes() for m in manifest}
    synthesize_dataset(SceneRecipe(seed=5), DEFAULT_TAXONOMY, 3, tmp_path)
    assert first == {m["path"]: (tmp_path / m["path"]).read_bytes() for m in manifest}


def test_dataset_unwritable_dir(tmp_path):
    with pytest.raises(OSError):
        synthesize_dataset(SceneRecipe(), DEFAULT_TAXONOMY, 1, tmp_path / "nope")


def test_dataset_reports_scene_index(tmp_path):
    recipe = SceneRecipe(seed=0, range_xy=5.0, n_things=((500, 500), (0, 0), (0, 0)))
    with pytest.raises(CapacityError, match="scene 0"):
        synthesize_dataset(recipe, DEFAULT_TAXONOMY, 2, tmp_path)
