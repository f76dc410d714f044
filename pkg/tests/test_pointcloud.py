import numpy as np
import pytest

from pointgen3d.pointcloud import (
    PointCloud,
    SparseVoxelGrid,
    farthest_point_sampling,
    manhattan_offsets,
    neighbor_voxel_query,
    ravel_index,
    voxelize,
)


def make_cloud(rng, n=200, span=3.0, with_intensity=True):
    coords = rng.uniform(0.0, span, size=(n, 3))
    feats = rng.uniform(0, 1, size=(n, 1)) if with_intensity else None
    return PointCloud(coords, feats)


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, 0.0, np.nan]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), features=np.zeros((2, 1)))
    pc = PointCloud(np.zeros((4, 3)), scores=np.ones(4))
    assert len(pc) == 4


def test_manhattan_offsets_counts():
    # |{d : |d|_1 <= r}| follows the centered octahedral numbers.
    assert manhattan_offsets(0).shape == (1, 3)
    assert manhattan_offsets(1).shape == (7, 3)
    assert manhattan_offsets(2).shape == (25, 3)
    off = manhattan_offsets(1)
    assert np.abs(off).sum(axis=1).max() <= 1
    # Lexicographic enumeration is deterministic.
    assert off.tolist() == sorted(off.tolist())


def test_voxelize_features_are_offsets_and_intensity():
    # Two points in one voxel: feature = (mean - center, mean intensity).
    coords = np.array([[0.25, 0.25, 0.25], [0.35, 0.45, 0.15]])
    cloud = PointCloud(coords, features=np.array([[0.2], [0.6]]))
    grid = voxelize(cloud, (0, 0, 0), (1, 1, 1), (2, 2, 2))
    assert len(grid) == 1
    assert grid.indices.tolist() == [[0, 0, 0]]
    mean = coords.mean(axis=0)
    assert np.allclose(grid.features[0, :3], mean - 0.5, atol=1e-6)
    assert grid.features[0, 3] == pytest.approx(0.4, abs=1e-6)


def test_voxelize_out_of_range_dropped():
    coords = np.array([[-0.1, 0.5, 0.5], [2.0, 0.5, 0.5], [0.5, 0.5, 0.5]])
    grid = voxelize(PointCloud(coords), (0, 0, 0), (1, 1, 1), (2, 2, 2))
    assert len(grid) == 1


def test_voxelize_empty():
    grid = voxelize(PointCloud(np.zeros((0, 3))), (0, 0, 0), (1, 1, 1), (4, 4, 4))
    assert len(grid) == 0
    assert grid.features.shape == (0, 4)


def test_voxelize_permutation_invariant():
    rng = np.random.default_rng(0)
    cloud = make_cloud(rng, 500)
    grid_a = voxelize(cloud, (0, 0, 0), (0.5, 0.5, 0.5), (6, 6, 6))
    perm = rng.permutation(len(cloud))
    shuffled = PointCloud(cloud.coords[perm], cloud.features[perm])
    grid_b = voxelize(shuffled, (0, 0, 0), (0.5, 0.5, 0.5), (6, 6, 6))
    assert np.array_equal(grid_a.indices, grid_b.indices)
    assert np.array_equal(grid_a.features, grid_b.features)


def test_voxelize_max_points_cap():
    coords = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.9, 0.9, 0.9]])
    cloud = PointCloud(coords, features=np.array([[1.0], [0.0], [0.5]]))
    grid = voxelize(cloud, (0, 0, 0), (1, 1, 1), (1, 1, 1), max_points_per_voxel=2)
    # Only the first two points in input order contribute.
    assert grid.features[0, 3] == pytest.approx(0.5, abs=1e-6)
    mean = coords[:2].mean(axis=0)
    assert np.allclose(grid.features[0, :3], mean - 0.5, atol=1e-6)


def test_voxelize_keys_sorted():
    rng = np.random.default_rng(1)
    grid = voxelize(make_cloud(rng, 400), (0, 0, 0), (0.5, 0.5, 0.5), (6, 6, 6))
    keys = grid.keys()
    assert np.all(np.diff(keys) > 0)


def test_grid_feature_at_and_centers():
    grid = voxelize(
        PointCloud(np.array([[1.25, 0.25, 0.75]])), (0, 0, 0), (0.5, 0.5, 0.5),
        (4, 4, 4),
    )
    assert grid.indices.tolist() == [[2, 0, 1]]
    assert np.allclose(grid.voxel_centers(), [[1.25, 0.25, 0.75]])
    assert grid.feature_at((2, 0, 1)) is not None
    assert grid.feature_at((0, 0, 0)) is None


def test_grid_rejects_out_of_bounds_indices():
    with pytest.raises(ValueError):
        SparseVoxelGrid((0, 0, 0), (1, 1, 1), (2, 2, 2),
                        np.array([[2, 0, 0]]), np.zeros((1, 4)))


def test_ravel_index_unravels():
    shape = (5, 7, 3)
    rng = np.random.default_rng(2)
    idx = np.column_stack([rng.integers(0, s, 50) for s in shape])
    keys = ravel_index(idx, shape)
    sy, sz = shape[1], shape[2]
    back = np.column_stack([keys // (sy * sz), (keys // sz) % sy, keys % sz])
    assert np.array_equal(back, idx)


def test_neighbor_query_dense_block():
    # Fully occupied 3x3x3 block, radius 1 around the center -> 7 voxels.
    idx = np.array([[x, y, z] for x in range(3) for y in range(3) for z in range(3)])
    grid = SparseVoxelGrid((0, 0, 0), (1, 1, 1), (3, 3, 3), idx,
                           np.arange(27, dtype=np.float64).reshape(27, 1))
    nbr_idx, nbr_feat = neighbor_voxel_query(grid, (1, 1, 1), 1, 27)
    assert nbr_idx.shape == (7, 3)
    assert np.abs(nbr_idx - 1).sum(axis=1).max() <= 1


def test_neighbor_query_overflow_is_seeded_and_sorted():
    idx = np.array([[x, y, z] for x in range(3) for y in range(3) for z in range(3)])
    grid = SparseVoxelGrid((0, 0, 0), (1, 1, 1), (3, 3, 3), idx,
                           np.arange(27, dtype=np.float64).reshape(27, 1))
    a_idx, _ = neighbor_voxel_query(grid, (1, 1, 1), 1, 4, seed=9)
    b_idx, _ = neighbor_voxel_query(grid, (1, 1, 1), 1, 4, seed=9)
    assert np.array_equal(a_idx, b_idx)
    c_idx, _ = neighbor_voxel_query(grid, (1, 1, 1), 1, 4, seed=10)
    assert a_idx.shape == (4, 3) and c_idx.shape == (4, 3)
    # Selection keeps the enumeration order of the full neighborhood.
    keys = ravel_index(a_idx, grid.spatial_shape)
    assert np.all(np.diff(keys) > 0)


def test_neighbor_query_edge_clipping():
    idx = np.array([[0, 0, 0], [1, 0, 0]])
    grid = SparseVoxelGrid((0, 0, 0), (1, 1, 1), (2, 1, 1), idx, np.ones((2, 1)))
    nbr_idx, _ = neighbor_voxel_query(grid, (0, 0, 0), 1, 8)
    assert nbr_idx.shape == (2, 3)
    with pytest.raises(ValueError):
        neighbor_voxel_query(grid, (0, 0, 0), -1, 8)
    with pytest.raises(ValueError):
        neighbor_voxel_query(grid, (0, 0, 0), 1, 0)


def test_fps_wrapper_accepts_pointcloud():
    rng = np.random.default_rng(3)
    cloud = make_cloud(rng, 50)
    idx = farthest_point_sampling(cloud, 10, 0)
    assert idx.shape == (10,)
    assert len(set(idx.tolist())) == 10


def test_grid_canonicalizes_construction_order():
    # keys() and feature_at() binary-search, so rows must sort on build
    idx = np.array([[2, 1, 0], [0, 0, 1], [1, 2, 2], [0, 0, 0]])
    feats = np.array([[20.0], [1.0], [12.0], [0.0]])
    grid = SparseVoxelGrid((0, 0, 0), (1, 1, 1), (3, 3, 3), idx, feats)
    assert np.all(np.diff(grid.keys()) > 0)
    for row, val in zip(idx, feats):
        assert grid.feature_at(row) == val[0]
