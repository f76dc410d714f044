"""RoI point generation: positional encoding, grid-token refinement, offset and
semantic-feature generation, foreground scoring, completion targets, and the
point-generation losses.

Grid features are refined as a G^3-token sequence by a single pre-norm
Transformer encoder layer whose positional term enters queries and keys only,
so zeroed value/output/feed-forward projections leave tokens unchanged. A
two-layer MLP then emits a per-token offset and semantic feature; the
foreground score is a linear-sigmoid projection of the semantic feature.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .geometry import CORNER_SIGNS, Box3D, canonical_xyz, world_xyz
from .pointcloud import chamfer_distance


@dataclass(frozen=True)
class GeneratedSemanticPoint:
    """One generated point: world position, its offset provenance, semantics."""

    position: np.ndarray
    offset: np.ndarray
    semantic_feature: np.ndarray
    foreground_score: float

    @property
    def source_grid_point(self) -> np.ndarray:
        return self.position - self.offset


def positional_input(boxes: torch.Tensor, unit_grid: torch.Tensor) -> torch.Tensor:
    """Raw 27-dim positional vectors for each grid point of each box.

    Layout per point: [g - r_center; g - r_1; ...; g - r_8] expressed in the
    box canonical frame, so the encoding depends only on box dimensions and
    is invariant to the proposal's pose.
    """
    dims = boxes[:, 3:6]
    g_local = unit_grid.unsqueeze(0) * dims.unsqueeze(1)  # (N, P, 3)
    signs = boxes.new_tensor(CORNER_SIGNS)  # (8, 3)
    corners = signs.unsqueeze(0) * (0.5 * dims).unsqueeze(1)  # (N, 8, 3)
    rel_c = g_local  # center is the canonical origin
    rel_k = g_local.unsqueeze(2) - corners.unsqueeze(1)  # (N, P, 8, 3)
    n, p = g_local.shape[0], g_local.shape[1]
    return torch.cat([rel_c, rel_k.reshape(n, p, 24)], dim=2)


class GridTransformer(nn.Module):
    """Single pre-norm encoder layer over the grid-token sequence.

    The positional encoding is added to queries and keys, not to values, and
    never enters the residual stream.
    """

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        if dim % heads:
            raise ValueError("token dim must divide evenly across heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.ln_attn = nn.LayerNorm(dim)
        self.ln_ff = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        n, p, _ = t.shape
        return t.view(n, p, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, tokens: torch.Tensor, pos: torch.Tensor,
                return_attention: bool = False):
        x = self.ln_attn(tokens)
        qk = x + pos
        q = self._split(self.q_proj(qk))
        k = self._split(self.k_proj(qk))
        v = self._split(self.v_proj(x))
        attn = torch.softmax(
            q @ k.transpose(-2, -1) / self.head_dim ** 0.5, dim=-1
        )
        mixed = (attn @ v).transpose(1, 2).reshape(tokens.shape)
        tokens = tokens + self.out_proj(mixed)
        tokens = tokens + self.ff2(torch.relu(self.ff1(self.ln_ff(tokens))))
        if return_attention:
            return tokens, attn
        return tokens


class RPGModule(nn.Module):
    """Generates offset points with semantic features and foreground scores."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        dim = cfg.roi.grid_feature_dim
        self.grid_size = cfg.roi.grid_size
        self.pos_encoder = nn.Sequential(
            nn.Linear(27, cfg.rpg.pos_hidden),
            nn.ReLU(),
            nn.Linear(cfg.rpg.pos_hidden, dim),
        )
        self.transformer = GridTransformer(
            dim, cfg.rpg.transformer_heads, cfg.rpg.transformer_ff_dim
        )
        self.generator = nn.Sequential(
            nn.Linear(dim, cfg.rpg.gen_hidden),
            nn.ReLU(),
            nn.Linear(cfg.rpg.gen_hidden, 3 + cfg.rpg.semantic_dim),
        )
        self.score_proj = nn.Linear(cfg.rpg.semantic_dim, 1)
        g = self.grid_size
        steps = (torch.arange(g, dtype=torch.float32) + 0.5) / g - 0.5
        zz, yy, xx = torch.meshgrid(steps, steps, steps, indexing="ij")
        unit = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
        self.register_buffer("unit_grid", unit, persistent=False)

    def forward(self, grid_feats: torch.Tensor, grid_points: torch.Tensor,
                boxes: torch.Tensor) -> dict:
        """grid_feats (N, P, C), grid_points (N, P, 3), boxes (N, 7)."""
        rpg = self.cfg.rpg
        if rpg.use_transformer:
            pos = self.pos_encoder(positional_input(boxes, self.unit_grid))
            refined = self.transformer(grid_feats, pos)
        else:
            refined = grid_feats
        gen = self.generator(refined)
        offsets = gen[..., :3]
        f_se = gen[..., 3:]
        if not rpg.use_offset_path:
            offsets = torch.zeros_like(offsets)
        if rpg.offset_center == "roi_center":
            base = boxes[:, None, :3].expand_as(grid_points)
        else:
            base = grid_points
        points = base + offsets
        logits = self.score_proj(f_se).squeeze(-1)
        if rpg.use_score_path:
            scores = torch.sigmoid(logits)
        else:
            scores = torch.ones_like(logits)
        return {
            "points": points,
            "offsets": offsets,
            "f_se": f_se,
            "score_logits": logits,
            "scores": scores,
            "refined": refined,
        }


MIRRORED_CLASSES = ("car", "cyclist")


@dataclass
class InstanceRecord:
    """One ground-truth object: class, box dims, and its interior points
    stored in the canonical frame normalized by the box extents."""

    key: str
    class_id: int
    dims: np.ndarray
    points: np.ndarray


def normalize_instance(points: np.ndarray, box: Box3D) -> np.ndarray:
    return canonical_xyz(points, box) / box.dims


def denormalize_instance(norm_points: np.ndarray, box: Box3D) -> np.ndarray:
    return world_xyz(norm_points * box.dims, box)


def instance_similarity(a: InstanceRecord, b: InstanceRecord, cfg) -> float:
    """Lower is more similar: dim distance plus normalized-cloud Chamfer."""
    d_dim = float(np.linalg.norm(a.dims - b.dims))
    d_cd = float(chamfer_distance(a.points, b.points))
    return (cfg.rpg.similarity_dim_weight * d_dim
            + cfg.rpg.similarity_chamfer_weight * d_cd)


def build_completion_target(record: InstanceRecord, bank: list, cfg,
                            class_names) -> np.ndarray:
    """Merged, mirrored, FPS-capped completion cloud in normalized canonical
    coordinates for one instance.

    Takes the two most similar same-class instances (excluding the record
    itself), unions their normalized clouds with the record's, mirrors across
    the heading plane for mirror-symmetric classes, and subsamples to at most
    the configured target size by farthest point sampling.
    """
    scored = []
    for other in bank:
        if other.key == record.key or other.class_id != record.class_id:
            continue
        scored.append((instance_similarity(record, other, cfg), other.key, other))
    scored.sort(key=lambda t: (t[0], t[1]))
    clouds = [record.points] + [o.points for _, _, o in scored[:2]]
    merged = np.concatenate(clouds, axis=0)
    if class_names[record.class_id] in MIRRORED_CLASSES:
        mirrored = merged.copy()
        mirrored[:, 1] = -mirrored[:, 1]
        merged = np.concatenate([merged, mirrored], axis=0)
    cap = cfg.rpg.target_points
    if merged.shape[0] > cap:
        sel = kernels.farthest_point_sampling(
            np.ascontiguousarray(merged, dtype=np.float64), cap, 0
        )
        merged = merged[sel]
    return merged.astype(np.float32)


class TargetBank:
    """Instance bank plus per-instance completion targets.

    Records and targets are keyed by "<frame_id>_<gt_index>". Persisted as a
    directory of little-endian binary records with a text index, so a rebuild
    is byte-identical.
    """

    def __init__(self, class_names):
        self.class_names = list(class_names)
        self.records = {}
        self.targets = {}

    def add_scene(self, frame_id: str, cloud_xyz: np.ndarray, boxes,
                  class_ids) -> None:
        for gi, (box, ci) in enumerate(zip(boxes, class_ids)):
            mask = kernels.points_in_boxes_mask(
                np.ascontiguousarray(cloud_xyz, dtype=np.float64),
                box.to_array().reshape(1, 7),
            )[:, 0]
            if not mask.any():
                continue
            key = f"{frame_id}_{gi}"
            self.records[key] = InstanceRecord(
                key=key,
                class_id=int(ci),
                dims=np.asarray(box.dims, dtype=np.float64),
                points=normalize_instance(cloud_xyz[mask], box),
            )

    def build_targets(self, cfg) -> None:
        bank = [self.records[k] for k in sorted(self.records)]
        self.targets = {
            rec.key: build_completion_target(rec, bank, cfg, self.class_names)
            for rec in bank
        }

    def target_world(self, key: str, box: Box3D):
        """Completion target denormalized into the given box, or None."""
        t = self.targets.get(key)
        if t is None:
            return None
        return denormalize_instance(t.astype(np.float64), box)

    @staticmethod
    def _write_record(path, class_id, dims, points):
        pts = np.ascontiguousarray(points, dtype="<f4")
        with open(path, "wb") as fh:
            np.asarray([class_id, pts.shape[0]], dtype="<i4").tofile(fh)
            np.asarray(dims, dtype="<f4").tofile(fh)
            pts.tofile(fh)

    @staticmethod
    def _read_record(path):
        with open(path, "rb") as fh:
            head = np.fromfile(fh, dtype="<i4", count=2)
            dims = np.fromfile(fh, dtype="<f4", count=3).astype(np.float64)
            pts = np.fromfile(fh, dtype="<f4", count=int(head[1]) * 3)
        return int(head[0]), dims, pts.reshape(-1, 3)

    def save(self, out_dir: str) -> None:
        inst_dir = os.path.join(out_dir, "instances")
        tgt_dir = os.path.join(out_dir, "targets")
        os.makedirs(inst_dir, exist_ok=True)
        os.makedirs(tgt_dir, exist_ok=True)
        lines = []
        for key in sorted(self.records):
            rec = self.records[key]
            self._write_record(
                os.path.join(inst_dir, key + ".bin"),
                rec.class_id, rec.dims, rec.points,
            )
            if key in self.targets:
                self._write_record(
                    os.path.join(tgt_dir, key + ".bin"),
                    rec.class_id, rec.dims, self.targets[key],
                )
            lines.append(
                f"{key} {self.class_names[rec.class_id]} {rec.points.shape[0]}"
            )
        with open(os.path.join(out_dir, "index.txt"), "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, out_dir: str, class_names) -> "TargetBank":
        bank = cls(class_names)
        index = os.path.join(out_dir, "index.txt")
        with open(index) as fh:
            keys = [line.split()[0] for line in fh if line.strip()]
        for key in keys:
            cid, dims, pts = cls._read_record(
                os.path.join(out_dir, "instances", key + ".bin")
            )
            bank.records[key] = InstanceRecord(key, cid, dims, pts)
            tpath = os.path.join(out_dir, "targets", key + ".bin")
            if os.path.exists(tpath):
                bank.targets[key] = cls._read_record(tpath)[2]
        return bank


def score_fps_start(n: int, scene_pos: int, cfg) -> int:
    if cfg.rpg.score_fps_start == "zero" or n <= 1:
        return 0
    rng = np.random.default_rng(
        np.random.SeedSequence([int(cfg.seed), 7, int(scene_pos)])
    )
    return int(rng.integers(n))


def rpg_loss(outputs: dict, batch_idx: torch.Tensor, proposal_boxes: torch.Tensor,
             scenes: list, bank: TargetBank, cfg) -> dict:
    """Point-generation loss: two-sided focal score term plus offset Chamfer.

    outputs: RPGModule forward results over all proposals in the batch.
    scenes: Scene objects carrying gt_boxes (M, 7) float64 and gt_keys.
    Generated points are labeled foreground when inside any GT box; the score
    term is evaluated on a scene-wide farthest-point sample and averaged over
    the sampled points. The offset term averages per-proposal Chamfer to the
    completion target over foreground proposals (IoU >= threshold).
    """
    points = outputs["points"]
    logits = outputs["score_logits"]
    gamma = cfg.rpg.score_gamma
    n_p = cfg.rpg.score_points
    device = points.device

    score_terms = []
    offset_terms = []
    for b, scene in enumerate(scenes):
        rows = (batch_idx == b).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        pts = points[rows].reshape(-1, 3)
        lgt = logits[rows].reshape(-1)
        coords = pts.detach().numpy().astype(np.float64)
        gt = scene.gt_boxes
        if gt.shape[0]:
            inside = kernels.points_in_boxes_mask(
                np.ascontiguousarray(coords), np.ascontiguousarray(gt)
            ).any(axis=1)
        else:
            inside = np.zeros(coords.shape[0], dtype=bool)
        if cfg.rpg.use_score_path:
            k = min(n_p, coords.shape[0])
            sel = kernels.farthest_point_sampling(
                coords, k, score_fps_start(coords.shape[0], b, cfg)
            )
            sel_t = torch.from_numpy(sel)
            fg = torch.from_numpy(inside[sel]).to(device)
            lg = lgt[sel_t]
            s = torch.sigmoid(lg)
            log_s = F.logsigmoid(lg)
            log_ns = F.logsigmoid(-lg)
            term = torch.where(
                fg, -((1 - s) ** gamma) * log_s, -(s ** gamma) * log_ns
            )
            score_terms.append(term)
        if cfg.rpg.use_offset_path and gt.shape[0]:
            boxes_b = proposal_boxes[rows].detach().numpy().astype(np.float64)
            iou = kernels.iou_3d_matrix(
                np.ascontiguousarray(boxes_b), np.ascontiguousarray(gt)
            )
            best = iou.argmax(axis=1)
            fg_mask = iou[np.arange(len(rows)), best] >= cfg.rpg.fg_proposal_iou
            for pi in np.nonzero(fg_mask)[0]:
                key = scene.gt_keys[best[pi]]
                box = Box3D.from_array(gt[best[pi]])
                target = bank.target_world(key, box)
                if target is None:
                    continue
                gen = points[rows[pi]]
                offset_terms.append(
                    chamfer_distance(gen, torch.from_numpy(target).float())
                )

    zero = points.sum() * 0.0
    loss_score = (
        torch.cat(score_terms).mean() if score_terms else zero
    )
    loss_offset = (
        torch.stack(offset_terms).mean() if offset_terms else zero
    )
    return {
        "score": loss_score,
        "offset": loss_offset,
        "rpg": loss_score + loss_offset,
    }
