import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dqseg.errors import ContractError
from dqseg.voxel import (
    VoxelGridSpec,
    knn_weights,
    neighbor_table,
    point_representation,
    pool_voxel_features,
    v2b_project,
    v2p_interpolate,
    voxelize,
)

from conftest import make_cloud
from oracles import brute_force_v2p

WIDE_SPEC = VoxelGridSpec((-51.2, -51.2, -4.0), (0.05, 0.05, 0.05), (2048, 2048, 128))


def test_voxel_index_floor():
    grid = voxelize(make_cloud([[0.02, 0.02, 0.02]]), WIDE_SPEC)
    np.testing.assert_array_equal(grid.coords, [[1024, 1024, 80]])


def test_origin_maps_to_zero():
    grid = voxelize(make_cloud([[-51.2, -51.2, -4.0]]), WIDE_SPEC)
    np.testing.assert_array_equal(grid.coords, [[0, 0, 0]])


def test_shared_cell_dedup():
    grid = voxelize(make_cloud([[0.01, 0.01, 0.01], [0.02, 0.03, 0.04]]), WIDE_SPEC)
    assert grid.n_voxels == 1
    assert grid.point_to_voxel[0] == grid.point_to_voxel[1] == 0


def test_out_of_range_is_minus_one():
    grid = voxelize(make_cloud([[100, 0, 0], [0, 0, 0]]), WIDE_SPEC)
    np.testing.assert_array_equal(grid.point_to_voxel, [-1, 0])


def test_coarse_levels_nest():
    spec = VoxelGridSpec.from_range(12.8, (-1, 3.4), 0.2)
    rng = np.random.default_rng(0)
    cloud = make_cloud(rng.uniform([-12.8, -12.8, -1], [12.8, 12.8, 3.4], (500, 3)))
    full = voxelize(cloud, spec)
    for level in range(3):
        g = voxelize(cloud, spec, level)
        s = spec.stride(level)
        np.testing.assert_array_equal(g.coords[g.point_to_voxel], full.coords[full.point_to_voxel] // s)
        assert (g.coords < np.array(spec.level_dims(level))).all()


def test_level_dims_round_up():
    spec = VoxelGridSpec.from_range(12.8, (-1, 3.4), 0.1)
    assert spec.dense_dims == (256, 256, 44)
    assert spec.level_dims(0) == (32, 32, 6)


def test_translation_by_voxel_multiples():
    rng = np.random.default_rng(1)
    spec = VoxelGridSpec.from_range(12.8, (-1, 3.4), 0.1)
    size = np.asarray(spec.voxel_size)
    for _ in range(100):
        shift = rng.integers(-20, 21, size=3)
        p = rng.uniform([-10, -10, 1.05], [10, 10, 1.35], (50, 3))  # stays inside after any shift
        frac = (p - spec.origin) / size
        p = p[np.abs(frac - np.round(frac)).min(1) > 1e-6]
        a = spec.full_index(p)
        b = spec.full_index(p + shift * size)
        np.testing.assert_array_equal(b, a + shift)


def test_point_representation_offsets():
    cloud = make_cloud([[0.0, 0.0, 0.0]], intensity=[0.7])
    grid = voxelize(cloud, WIDE_SPEC)
    rep = point_representation(cloud, grid)
    center = np.array([-51.2, -51.2, -4.0]) + (np.array([1024, 1024, 80]) + 0.5) * 0.05
    np.testing.assert_allclose(rep[0, 4:7], -center, atol=1e-12)
    np.testing.assert_allclose(rep[0, 4:7], [-0.025, -0.025, -0.025], atol=1e-12)
    assert rep.shape == (1, 8) and rep[0, 3] == np.float32(0.7)


def test_point_at_voxel_center_has_zero_offset():
    spec = VoxelGridSpec((0, 0, 0), (0.5, 0.5, 0.5), (4, 4, 4))
    cloud = make_cloud([[0.75, 1.25, 0.25]])
    rep = point_representation(cloud, voxelize(cloud, spec))
    np.testing.assert_array_equal(rep[0, 4:7], 0)


def test_representation_intensity_column_only():
    a = make_cloud([[1, 2, 0.5], [3, 1, 0.2]], intensity=[0.1, 0.2])
    b = make_cloud([[1, 2, 0.5], [3, 1, 0.2]], intensity=[0.9, 0.4])
    g = voxelize(a, WIDE_SPEC)
    diff = point_representation(a, g) != point_representation(b, g)
    assert diff[:, 3].all() and not np.delete(diff, 3, axis=1).any()


def test_representation_mismatch():
    a = make_cloud([[0, 0, 0]])
    g = voxelize(make_cloud([[0, 0, 0], [1, 1, 1]]), WIDE_SPEC)
    with pytest.raises(ContractError):
        point_representation(a, g)


def test_max_pool():
    p2v = np.array([0, 0, 1])
    feats = torch.tensor([[1.0, 5.0], [3.0, 2.0], [7.0, 7.0]])
    np.testing.assert_array_equal(pool_voxel_features(feats, p2v, 2), [[3, 5], [7, 7]])
    np.testing.assert_array_equal(pool_voxel_features(feats, np.arange(3), 3), feats)


def test_v2p_single_voxel():
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))
    grid = voxelize(make_cloud([[0.5, 0.5, 0.5]]), spec).with_features(torch.tensor([[2.0, -1.0]]))
    out = v2p_interpolate(grid, np.random.default_rng(0).random((5, 3)) * 4, k=3)
    np.testing.assert_array_equal(out, np.tile([2.0, -1.0], (5, 1)))


def test_v2p_equidistant_average():
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))
    grid = voxelize(make_cloud([[0.5, 0.5, 0.5], [2.5, 0.5, 0.5]]), spec)
    grid = grid.with_features(torch.tensor([[1.0, 0.0], [3.0, 4.0]], dtype=torch.float64))
    out = v2p_interpolate(grid, [[1.5, 0.5, 0.5]], k=2)
    np.testing.assert_allclose(out, [[2.0, 2.0]], rtol=1e-15)


def test_v2p_coincident_point():
    rng = np.random.default_rng(2)
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (8, 8, 8))
    cloud = make_cloud(rng.integers(0, 8, (20, 3)) + 0.5)
    grid = voxelize(cloud, spec)
    feats = rng.normal(size=(grid.n_voxels, 4))
    grid = grid.with_features(torch.as_tensor(feats))
    out = v2p_interpolate(grid, grid.centers()[:1], k=3).numpy()
    np.testing.assert_allclose(out[0], feats[0], atol=1e-5)
    np.testing.assert_array_equal(out, brute_force_v2p(grid.centers(), feats, grid.centers()[:1], 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 100), st.integers(1, 6), st.integers(0, 2**31))
def test_v2p_matches_brute_force(n_vox, k, seed):
    rng = np.random.default_rng(seed)
    spec = VoxelGridSpec((0, 0, 0), (0.5, 0.5, 0.5), (16, 16, 16))
    cloud = make_cloud(rng.uniform(0, 8, (n_vox, 3)))
    grid = voxelize(cloud, spec)
    feats = rng.normal(size=(grid.n_voxels, 3))
    grid = grid.with_features(torch.as_tensor(feats))
    query = rng.uniform(-1, 9, (30, 3))
    out = v2p_interpolate(grid, query, k).numpy()
    np.testing.assert_array_equal(out, brute_force_v2p(grid.centers(), feats, query, k))
    _, w = knn_weights(grid.centers(), query, k)
    assert (w >= 0).all()
    np.testing.assert_allclose(w.sum(1), 1, atol=1e-6)


def test_v2p_empty_grid():
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))
    grid = voxelize(make_cloud([[10, 10, 10]]), spec).with_features(torch.zeros(0, 2))
    with pytest.raises(ContractError):
        v2p_interpolate(grid, [[0, 0, 0]])


def test_v2b_placement():
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (4, 5, 3))
    grid = voxelize(make_cloud([[2.5, 3.5, 1.5]]), spec).with_features(torch.tensor([[1.0, 2.0]]))
    bev = v2b_project(grid)
    assert bev.shape == (6, 4, 5)
    nz = torch.nonzero(bev).numpy()
    np.testing.assert_array_equal(nz, [[2, 2, 3], [3, 2, 3]])
    np.testing.assert_array_equal(bev[2:4, 2, 3], [1.0, 2.0])


def test_v2b_stacks_heights():
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (4, 4, 3))
    grid = voxelize(make_cloud([[1.5, 1.5, 0.5], [1.5, 1.5, 2.5]]), spec)
    bev = v2b_project(grid.with_features(torch.tensor([[1.0], [2.0]])))
    np.testing.assert_array_equal(bev[:, 1, 1], [1.0, 0.0, 2.0])
    assert bev.sum() == 3


def test_neighbor_table():
    spec = VoxelGridSpec((0, 0, 0), (1, 1, 1), (4, 4, 4))
    grid = voxelize(make_cloud([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [3.5, 3.5, 3.5]]), spec)
    table = neighbor_table(grid.coords, grid.dims)
    assert table.shape == (3, 27)
    np.testing.assert_array_equal(table[:, 0], [0, 1, 2])
    assert set(table[0][table[0] >= 0]) == {0, 1}
    assert set(table[2][table[2] >= 0]) == {2}
