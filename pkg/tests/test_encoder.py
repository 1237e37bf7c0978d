import numpy as np
import pytest
import torch

from dqseg.encoder import FeatureEncoder, prepare_geometry
from dqseg.errors import EmptySceneError
from dqseg.voxel import VoxelGridSpec

from conftest import make_cloud
from fdcheck import check_gradients

SPEC = VoxelGridSpec.from_range(12.8, (-1, 3.4), 0.2)


def _cloud(n=300, seed=0):
    rng = np.random.default_rng(seed)
    return make_cloud(rng.uniform([-6, -6, -0.5], [6, 6, 2.5], (n, 3)), intensity=rng.random(n))


def test_shapes_and_level_dims():
    enc = FeatureEncoder(base=8, embed=16, seed=0)
    grids, feats = enc.encode(_cloud(), SPEC)
    assert len(grids) == len(feats) == 4
    for level, (g, f) in enumerate(zip(grids, feats)):
        s = SPEC.stride(level)
        assert g.dims == tuple(-(-d // s) for d in SPEC.dense_dims)
        assert g.features.shape == (g.n_voxels, 16)
        assert f.shape == (300, 16)
        assert torch.isfinite(f).all()


def test_single_point_cloud():
    grids, feats = FeatureEncoder(base=8, embed=16).encode(make_cloud([[1.0, 2.0, 0.5]]), SPEC)
    assert [g.n_voxels for g in grids] == [1, 1, 1, 1]
    assert all(f.shape == (1, 16) for f in feats)


def test_out_of_range_cloud_is_empty_scene():
    with pytest.raises(EmptySceneError):
        prepare_geometry(make_cloud([[50.0, 0.0, 0.0]]), SPEC)


def test_duplicated_points_leave_voxel_features_unchanged():
    enc = FeatureEncoder(base=8, embed=16, seed=1)
    c = _cloud(100)
    twice = make_cloud(np.concatenate([c.positions] * 2), intensity=np.concatenate([c.intensity] * 2))
    ga, _ = enc.encode(c, SPEC)
    gb, fb = enc.encode(twice, SPEC)
    for a, b in zip(ga, gb):
        np.testing.assert_array_equal(a.coords, b.coords)
        assert torch.equal(a.features, b.features)


def test_point_order_invariance():
    enc = FeatureEncoder(base=8, embed=16, seed=2)
    c = _cloud(150)
    perm = np.random.default_rng(3).permutation(150)
    shuffled = make_cloud(c.positions[perm], intensity=c.intensity[perm])
    ga, fa = enc.encode(c, SPEC)
    gb, fb = enc.encode(shuffled, SPEC)
    for a, b in zip(ga, gb):
        assert torch.equal(a.features, b.features)
    for a, b in zip(fa, fb):
        torch.testing.assert_close(a[perm], b, rtol=0, atol=1e-6)


def test_same_seed_same_weights():
    a, b = FeatureEncoder(seed=4), FeatureEncoder(seed=4)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q)


def test_encoder_gradients_match_finite_differences():
    enc = FeatureEncoder(base=4, embed=8, seed=5).double()
    geom = prepare_geometry(_cloud(20, seed=6), SPEC)
    readout = torch.randn(20, 8, dtype=torch.double, generator=torch.Generator().manual_seed(0))

    def loss():
        return (enc(geom)[1][-1] * readout).sum()

    errors = check_gradients(loss, dict(enc.named_parameters()))
    assert max(errors.values()) < 1e-4, errors
