"""RoI grid pooling: per-proposal grid points and multi-scale voxel aggregation.

Each proposal is divided into G x G x G sub-voxels whose centers become grid
points. At every grid point, occupied voxels from the last three backbone
stages are gathered by index translation inside a Manhattan ball, embedded
relative to the grid point, passed through a per-stage MLP, and max-pooled.
The three per-stage results concatenate into the grid feature.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .geometry import Box3D, world_xyz
from .pointcloud import manhattan_offsets


def make_grid_points(box: Box3D, grid_size: int) -> np.ndarray:
    """Centers of the G^3 sub-voxels of a box, in world coordinates.

    Enumeration is x-fastest, then y, then z, over the box frame.
    """
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    g = grid_size
    steps = (np.arange(g, dtype=np.float64) + 0.5) / g - 0.5
    zz, yy, xx = np.meshgrid(steps, steps, steps, indexing="ij")
    unit = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)
    return world_xyz(unit * box.dims, box)


def grid_points_for_boxes(boxes: torch.Tensor, grid_size: int) -> torch.Tensor:
    """Batched torch variant of make_grid_points: (P, 7) -> (P, G^3, 3)."""
    g = grid_size
    steps = (torch.arange(g, dtype=boxes.dtype, device=boxes.device) + 0.5) / g - 0.5
    zz, yy, xx = torch.meshgrid(steps, steps, steps, indexing="ij")
    unit = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
    local = unit.unsqueeze(0) * boxes[:, None, 3:6]
    cos = torch.cos(boxes[:, 6]).unsqueeze(1)
    sin = torch.sin(boxes[:, 6]).unsqueeze(1)
    x = local[..., 0] * cos - local[..., 1] * sin + boxes[:, None, 0]
    y = local[..., 0] * sin + local[..., 1] * cos + boxes[:, None, 1]
    z = local[..., 2] + boxes[:, None, 2]
    return torch.stack([x, y, z], dim=-1)


class RoIGridPool(nn.Module):
    """Aggregates multi-scale voxel features at proposal grid points."""

    STAGES = (2, 3, 4)

    def __init__(self, cfg):
        super().__init__()
        self.grid_size = cfg.roi.grid_size
        self.radius = cfg.roi.neighbor_radius
        self.k = cfg.roi.neighbor_k
        self.seed = cfg.seed
        self.out_per_stage = cfg.roi.stage_out_channels
        hidden = cfg.roi.agg_hidden
        stage_channels = cfg.backbone.stage_channels
        self.mlps = nn.ModuleDict()
        for s in self.STAGES:
            c_in = 3 + stage_channels[s - 1]
            self.mlps[str(s)] = nn.Sequential(
                nn.Linear(c_in, hidden),
                nn.ReLU(),
                nn.Linear(hidden, self.out_per_stage),
            )
        # picks are pure functions of (stage, center key, hit count), so
        # repeated queries reuse the drawn subset
        self._pick_cache = {}

    @property
    def out_channels(self) -> int:
        return self.out_per_stage * len(self.STAGES)

    def _overflow_pick(self, stage_id: int, center_key: int, n_hits: int):
        key = (stage_id, center_key, n_hits)
        pick = self._pick_cache.get(key)
        if pick is None:
            rng = np.random.default_rng(
                np.random.SeedSequence([int(self.seed), int(stage_id),
                                        int(center_key)])
            )
            pick = np.sort(rng.choice(n_hits, size=self.k, replace=False))
            self._pick_cache[key] = pick
        return pick

    def _gather_stage(self, st, points: torch.Tensor,
                      point_batch: torch.Tensor, stage_id: int):
        """Neighbor rows for every query point of the batch in one stage.

        Returns (rows (Q, K) int64 into st.features, valid (Q, K) bool).
        Matches the single-center neighbor query: candidates enumerate the
        Manhattan ball lexicographically and overflow beyond K is resolved by
        a uniform draw seeded from (seed, stage, center key).
        """
        q = points.shape[0]
        k = self.k
        rows = torch.zeros(q, k, dtype=torch.int64)
        valid = torch.zeros(q, k, dtype=torch.bool)
        n = st.indices.shape[0]
        if n == 0 or q == 0:
            return rows, valid
        shape = st.spatial_shape
        vs = points.new_tensor(st.voxel_size())
        org = points.new_tensor(st.origin)
        centers = torch.floor((points - org) / vs).long()
        offsets = torch.from_numpy(manhattan_offsets(self.radius).copy())
        cand = centers[:, None, :] + offsets[None, :, :]
        ok = (cand >= 0).all(-1)
        for d in range(3):
            ok &= cand[..., d] < shape[d]
        sx, sy, sz = (int(v) for v in shape)
        cand_keys = (
            (point_batch[:, None] * sx + cand[..., 0]) * sy + cand[..., 1]
        ) * sz + cand[..., 2]
        pos = torch.searchsorted(st.keys, cand_keys[ok])
        pos_c = pos.clamp(max=n - 1)
        hit_flat = st.keys[pos_c] == cand_keys[ok]
        hit = torch.zeros_like(ok)
        hit[ok] = hit_flat
        found = torch.zeros(q, offsets.shape[0], dtype=torch.int64)
        found[ok] = pos_c
        counts = hit.sum(1)
        over = (counts > k).nonzero(as_tuple=True)[0]
        if over.numel():
            # hits enumerate row-major, so each row owns a contiguous slice;
            # replace overflowing slices by their seeded k-subset in one pass
            center_keys = (
                (centers[:, 0] * sy + centers[:, 1]) * sz + centers[:, 2]
            ).numpy()
            starts = np.zeros(q, dtype=np.int64)
            np.cumsum(counts.numpy()[:-1], out=starts[1:])
            counts_np = counts.numpy()
            keep = np.ones(int(counts_np.sum()), dtype=bool)
            for qi in over.tolist():
                pick = self._overflow_pick(
                    stage_id, int(center_keys[qi]), int(counts_np[qi])
                )
                sl = np.zeros(counts_np[qi], dtype=bool)
                sl[pick] = True
                keep[starts[qi]:starts[qi] + counts_np[qi]] = sl
            nz = hit.nonzero()
            kept = nz[torch.from_numpy(keep)]
            hit = torch.zeros_like(hit)
            hit[kept[:, 0], kept[:, 1]] = True
            counts = hit.sum(1)
        slot = hit.cumsum(1) - 1
        row_idx = torch.arange(q).unsqueeze(1).expand_as(hit)
        rows[row_idx[hit], slot[hit]] = found[hit]
        valid = torch.arange(k).unsqueeze(0) < counts.unsqueeze(1)
        return rows, valid

    def forward(self, stages: dict, proposals: list) -> dict:
        """Pool grid features for every proposal in the batch.

        stages: {2, 3, 4} -> SparseTensor from the backbone.
        proposals: per-scene dicts holding "boxes" (P, 7).
        Returns points (N, G^3, 3), features (N, G^3, C_g), batch_idx (N,).
        """
        g3 = self.grid_size ** 3
        boxes = torch.cat([p["boxes"] for p in proposals], dim=0)
        batch_idx = torch.cat([
            torch.full((p["boxes"].shape[0],), b, dtype=torch.int64)
            for b, p in enumerate(proposals)
        ])
        n = boxes.shape[0]
        if n == 0:
            return {
                "points": torch.zeros(0, g3, 3),
                "features": torch.zeros(0, g3, self.out_channels),
                "batch_idx": batch_idx,
            }
        points = grid_points_for_boxes(boxes, self.grid_size).reshape(-1, 3)
        point_batch = batch_idx.repeat_interleave(g3)
        q = points.shape[0]
        per_stage = []
        for s in self.STAGES:
            st = stages[s]
            rows, valid = self._gather_stage(st, points, point_batch, s)
            mlp = self.mlps[str(s)]
            out = points.new_zeros(q, self.k, self.out_per_stage)
            if bool(valid.any()):
                r = rows[valid]
                rel = st.voxel_centers()[r] - points[
                    torch.arange(q).unsqueeze(1).expand_as(valid)[valid]
                ]
                emb = mlp(torch.cat([rel, st.features[r]], dim=1))
                out[valid] = emb
            neg = torch.where(
                valid.unsqueeze(-1), out, out.new_tensor(float("-inf"))
            )
            pooled = neg.max(dim=1).values
            pooled = torch.where(
                valid.any(1, keepdim=True), pooled, torch.zeros_like(pooled)
            )
            per_stage.append(pooled)
        feats = torch.cat(per_stage, dim=1)
        return {
            "points": points.view(n, g3, 3),
            "features": feats.view(n, g3, self.out_channels),
            "batch_idx": batch_idx,
        }
