"""Point-cloud kernels: voxelization, sparse voxel storage, neighbor queries,
farthest point sampling, and Chamfer distance.

Chamfer accepts numpy arrays or torch tensors; the torch path is
differentiable with respect to the first cloud's coordinates (and the
second's, through the symmetric term).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from . import kernels


@dataclass(frozen=True)
class PointCloud:
    """N points with coordinates and optional per-point features/scores."""

    coords: np.ndarray
    features: np.ndarray | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "coords", coords)
        if not np.isfinite(coords).all():
            raise ValueError("point coordinates must be finite")
        n = coords.shape[0]
        if self.features is not None:
            feats = np.asarray(self.features)
            if feats.shape[0] != n:
                raise ValueError(f"features rows {feats.shape[0]} != {n} points")
            object.__setattr__(self, "features", feats.reshape(n, -1))
        if self.scores is not None:
            scores = np.asarray(self.scores).reshape(-1)
            if scores.shape[0] != n:
                raise ValueError(f"scores rows {scores.shape[0]} != {n} points")
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class SparseVoxelGrid:
    """Sparse index -> feature map over a quantized scene.

    Entries are stored as parallel arrays sorted by raveled index key, so
    the layout is canonical regardless of construction order.
    """

    origin: np.ndarray
    voxel_size: np.ndarray
    spatial_shape: np.ndarray
    indices: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)
    stage_id: int = 1

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        self.spatial_shape = np.asarray(self.spatial_shape, dtype=np.int64).reshape(3)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.features)
        n = self.indices.shape[0]
        if n:
            feats = feats.reshape(n, -1)
        elif feats.ndim != 2:
            # reshape(0, -1) is ambiguous; keep an explicit empty channel axis
            feats = feats.reshape(0, 0)
        self.features = feats
        if len(self) and (
            (self.indices < 0).any() or (self.indices >= self.spatial_shape).any()
        ):
            raise ValueError("voxel indices out of spatial_shape bounds")
        if n > 1:
            keys = ravel_index(self.indices, self.spatial_shape)
            if (np.diff(keys) < 0).any():
                order = np.argsort(keys, kind="stable")
                self.indices = self.indices[order]
                self.features = self.features[order]

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def keys(self) -> np.ndarray:
        """Raveled (sorted) int64 keys of the occupied voxels."""
        return ravel_index(self.indices, self.spatial_shape)

    def voxel_centers(self, indices=None) -> np.ndarray:
        idx = self.indices if indices is None else np.asarray(indices)
        return self.origin + (idx + 0.5) * self.voxel_size

    def feature_at(self, index_triple) -> np.ndarray | None:
        key = ravel_index(np.asarray(index_triple).reshape(1, 3), self.spatial_shape)
        pos = np.searchsorted(self.keys(), key)
        if pos[0] < len(self) and self.keys()[pos[0]] == key[0]:
            return self.features[pos[0]]
        return None


def ravel_index(indices, spatial_shape) -> np.ndarray:
    """Encode (N, 3) voxel indices into int64 keys (x-major)."""
    sx, sy, sz = (int(s) for s in spatial_shape)
    idx = np.asarray(indices, dtype=np.int64)
    return (idx[:, 0] * sy + idx[:, 1]) * sz + idx[:, 2]


@lru_cache(maxsize=None)
def manhattan_offsets(radius: int) -> np.ndarray:
    """Integer offsets with L1 norm <= radius, in lexicographic order."""
    r = int(radius)
    out = [
        (dx, dy, dz)
        for dx in range(-r, r + 1)
        for dy in range(-r, r + 1)
        for dz in range(-r, r + 1)
        if abs(dx) + abs(dy) + abs(dz) <= r
    ]
    arr = np.array(out, dtype=np.int64).reshape(-1, 3)
    arr.setflags(write=False)
    return arr


def voxelize(
    cloud: PointCloud,
    origin,
    voxel_size,
    spatial_shape,
    max_points_per_voxel: int = 0,
) -> SparseVoxelGrid:
    """Quantize a cloud onto a half-open grid [origin, origin + size*shape).

    The voxel feature is the mean over member points of (offset from voxel
    center, intensity); intensity comes from the cloud's first feature
    column (zero when absent). At most ``max_points_per_voxel`` points
    contribute per voxel in input order; 0 disables truncation.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    voxel_size = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    spatial_shape = np.asarray(spatial_shape, dtype=np.int64).reshape(3)
    if (voxel_size <= 0).any():
        raise ValueError("voxel_size must be positive per axis")

    coords = cloud.coords
    if cloud.features is not None:
        intensity = np.asarray(cloud.features[:, 0], dtype=np.float64)
    else:
        intensity = np.zeros(len(cloud))

    upper = origin + voxel_size * spatial_shape
    in_range = (coords >= origin).all(axis=1) & (coords < upper).all(axis=1)
    coords = coords[in_range]
    intensity = intensity[in_range]
    idx = np.floor((coords - origin) / voxel_size).astype(np.int64)
    # Guard against border points quantizing onto the open edge.
    ok = (idx >= 0).all(axis=1) & (idx < spatial_shape).all(axis=1)
    coords, intensity, idx = coords[ok], intensity[ok], idx[ok]

    if coords.shape[0] == 0:
        return SparseVoxelGrid(
            origin, voxel_size, spatial_shape,
            np.zeros((0, 3), np.int64), np.zeros((0, 4), np.float32),
        )

    keys = ravel_index(idx, spatial_shape)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    group_start = np.r_[0, 1 + np.flatnonzero(np.diff(sorted_keys))]
    group_id = np.cumsum(np.r_[0, np.diff(sorted_keys) != 0])
    rank = np.arange(len(order)) - group_start[group_id]
    keep = order if max_points_per_voxel <= 0 else order[rank < max_points_per_voxel]

    # Sort retained members by value so the per-voxel mean accumulates in a
    # canonical order: the result is exactly permutation-invariant.
    rows = np.column_stack([coords[keep], intensity[keep]])
    member_keys = keys[keep]
    final = np.lexsort((rows[:, 3], rows[:, 2], rows[:, 1], rows[:, 0], member_keys))
    rows = rows[final]
    member_keys = member_keys[final]

    starts = np.r_[0, 1 + np.flatnonzero(np.diff(member_keys))]
    counts = np.diff(np.r_[starts, len(member_keys)])
    uniq_keys = member_keys[starts]
    sums = np.add.reduceat(rows, starts, axis=0)
    means = sums / counts[:, None]

    sx, sy, sz = (int(s) for s in spatial_shape)
    out_idx = np.column_stack(
        [uniq_keys // (sy * sz), (uniq_keys // sz) % sy, uniq_keys % sz]
    )
    centers = origin + (out_idx + 0.5) * voxel_size
    feats = np.empty((len(uniq_keys), 4), dtype=np.float32)
    feats[:, :3] = means[:, :3] - centers
    feats[:, 3] = means[:, 3]
    return SparseVoxelGrid(origin, voxel_size, spatial_shape, out_idx, feats)


def neighbor_voxel_query(
    grid: SparseVoxelGrid,
    center_index,
    manhattan_radius: int,
    k: int,
    seed: int = 0,
):
    """Up to k occupied voxels within a Manhattan ball of the center index.

    When more than k neighbors are occupied, a seeded uniform subsample of
    size k is taken; the draw depends only on (seed, stage_id, center key),
    and the result keeps the lexicographic offset enumeration order.

    Returns (indices (n, 3), features (n, C)).
    """
    if manhattan_radius < 0:
        raise ValueError("manhattan_radius must be >= 0")
    if k < 1:
        raise ValueError("k must be >= 1")
    center = np.asarray(center_index, dtype=np.int64).reshape(3)
    cand = center + manhattan_offsets(manhattan_radius)
    ok = (cand >= 0).all(axis=1) & (cand < grid.spatial_shape).all(axis=1)
    cand = cand[ok]
    if cand.shape[0] == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, grid.num_channels))

    keys = grid.keys()
    cand_keys = ravel_index(cand, grid.spatial_shape)
    pos = np.searchsorted(keys, cand_keys)
    pos_c = np.minimum(pos, len(keys) - 1)
    hit = keys[pos_c] == cand_keys
    rows = pos_c[hit]
    if rows.shape[0] > k:
        center_key = int(ravel_index(center.reshape(1, 3), grid.spatial_shape)[0])
        rng = np.random.default_rng(
            np.random.SeedSequence([int(seed), int(grid.stage_id), center_key])
        )
        pick = np.sort(rng.choice(rows.shape[0], size=k, replace=False))
        rows = rows[pick]
    return grid.indices[rows], grid.features[rows]


def farthest_point_sampling(points, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy max-min subsampling indices; see kernels for tie-break rules."""
    coords = points.coords if isinstance(points, PointCloud) else np.asarray(points)
    return kernels.farthest_point_sampling(coords, k, start_index)


def _as_coords(cloud):
    if isinstance(cloud, PointCloud):
        return cloud.coords
    return cloud


def chamfer_distance(p, q):
    """Symmetric mean-of-squared nearest-neighbor distance between two clouds.

    Accepts (N, 3) numpy arrays, torch tensors, or PointClouds. Raises on
    empty inputs (the formula divides by both cardinalities). With torch
    inputs the result carries gradients to both coordinate sets.
    """
    p = _as_coords(p)
    q = _as_coords(q)
    if isinstance(p, torch.Tensor) or isinstance(q, torch.Tensor):
        pt = p if isinstance(p, torch.Tensor) else torch.as_tensor(p)
        qt = q if isinstance(q, torch.Tensor) else torch.as_tensor(q, dtype=pt.dtype)
        if pt.shape[0] == 0 or qt.shape[0] == 0:
            raise ValueError("chamfer_distance requires non-empty clouds")
        sq = ((pt[:, None, :] - qt[None, :, :]) ** 2).sum(-1)
        return sq.min(dim=1).values.mean() + sq.min(dim=0).values.mean()
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("chamfer_distance requires non-empty clouds")
    sq = ((p[:, None, :] - q[None, :, :]) ** 2).sum(-1)
    return float(sq.min(axis=1).mean() + sq.min(axis=0).mean())
