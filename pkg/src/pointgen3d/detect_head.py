"""Stage-two head: canonical local spatial features, set-abstraction encoding
of the generated semantic points into a per-RoI feature, and the confidence /
box-refinement branches with their losses.

Grouping runs in extent-normalized canonical coordinates so the ball radii
scale with the proposal. Every point acts as a centroid and groups are
uncapped by default, which makes the encoder exactly invariant to permutation
and duplication of its input points.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .rpn import decode_boxes, encode_boxes, nms_bev, wrap_angle_t


def canonical_points(points: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """World points (N, P, 3) into each proposal's canonical frame."""
    rel = points - boxes[:, None, :3]
    cos = torch.cos(boxes[:, 6]).unsqueeze(1)
    sin = torch.sin(boxes[:, 6]).unsqueeze(1)
    xc = rel[..., 0] * cos + rel[..., 1] * sin
    yc = -rel[..., 0] * sin + rel[..., 1] * cos
    return torch.stack([xc, yc, rel[..., 2]], dim=-1)


def local_spatial_input(points: torch.Tensor, boxes: torch.Tensor,
                        scores: torch.Tensor) -> torch.Tensor:
    """The 5-wide per-point input: canonical coords, world depth, score."""
    canon = canonical_points(points, boxes)
    depth = torch.linalg.norm(points, dim=-1, keepdim=True)
    return torch.cat([canon, depth, scores.unsqueeze(-1)], dim=-1)


class SetAbstraction(nn.Module):
    """One grouping level: ball query around every point, shared two-layer
    perceptron on [relative coords; neighbor feature], max-pool per group."""

    def __init__(self, in_channels: int, out_channels: int, radius: float,
                 group_cap: int):
        super().__init__()
        self.radius = radius
        self.group_cap = group_cap
        self.lin1 = nn.Linear(3 + in_channels, out_channels)
        self.lin2 = nn.Linear(out_channels, out_channels)

    def forward(self, coords: torch.Tensor, feats: torch.Tensor,
                rel: torch.Tensor = None, d2: torch.Tensor = None) -> torch.Tensor:
        n, p, _ = coords.shape
        if rel is None:
            rel = coords[:, None, :, :] - coords[:, :, None, :]  # (N, Pc, Pj, 3)
            d2 = rel.square().sum(-1)
        mask = d2 <= self.radius ** 2
        if self.group_cap and self.group_cap < p:
            ranked = torch.where(mask, d2, d2.new_tensor(float("inf"))).argsort(
                dim=-1, stable=True
            )[..., : self.group_cap]
            capped = torch.zeros_like(mask)
            capped.scatter_(-1, ranked, True)
            mask = mask & capped
        grouped = torch.cat(
            [rel, feats[:, None, :, :].expand(n, p, p, feats.shape[-1])], dim=-1
        )
        h = torch.relu(self.lin2(torch.relu(self.lin1(grouped))))
        h = torch.where(mask.unsqueeze(-1), h, h.new_tensor(float("-inf")))
        return h.max(dim=2).values


class DetectionHead(nn.Module):
    """Confidence and refinement branches over the encoded RoI feature."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.local_mlp = nn.Sequential(
            nn.Linear(5, cfg.head.local_hidden),
            nn.ReLU(),
            nn.Linear(cfg.head.local_hidden, cfg.head.spatial_dim),
        )
        merged = cfg.head.spatial_dim + cfg.rpg.semantic_dim
        c1, c2 = cfg.head.sa_channels
        r1, r2 = cfg.head.sa_radii
        cap = cfg.head.sa_group_cap
        self.sa1 = SetAbstraction(merged, c1, r1, cap)
        self.sa2 = SetAbstraction(c1, c2, r2, cap)
        self.global_proj = nn.Sequential(
            nn.Linear(c2, cfg.head.roi_feature_dim), nn.ReLU()
        )

        def branch(out_dim):
            layers = []
            width = cfg.head.roi_feature_dim
            for _ in range(cfg.head.branch_depth):
                layers += [nn.Linear(width, cfg.head.branch_hidden), nn.ReLU()]
                width = cfg.head.branch_hidden
            layers.append(nn.Linear(width, out_dim))
            return nn.Sequential(*layers)

        self.conf_branch = branch(1)
        self.reg_branch = branch(7)

    def encode_roi(self, points: torch.Tensor, f_sp: torch.Tensor,
                   f_se: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """Set-abstraction encoding of the generated point set, (N, f_r)."""
        canon = canonical_points(points, boxes)
        norm = canon / boxes[:, None, 3:6]
        feats = torch.cat([f_sp, f_se], dim=-1)
        # both levels group around the same centroids, so the pairwise
        # geometry is computed once
        rel = norm[:, None, :, :] - norm[:, :, None, :]
        d2 = rel.square().sum(-1)
        h = self.sa1(norm, feats, rel, d2)
        h = self.sa2(norm, h, rel, d2)
        return self.global_proj(h.max(dim=1).values)

    def forward(self, points: torch.Tensor, f_se: torch.Tensor,
                scores: torch.Tensor, boxes: torch.Tensor) -> dict:
        f_sp = self.local_mlp(local_spatial_input(points, boxes, scores))
        f_r = self.encode_roi(points, f_sp, f_se, boxes)
        return {
            "f_r": f_r,
            "conf": self.conf_branch(f_r).squeeze(-1),
            "reg": self.reg_branch(f_r),
        }


def match_proposals(boxes: np.ndarray, labels: np.ndarray, gt_boxes: np.ndarray,
                    gt_classes: np.ndarray) -> tuple:
    """Best same-class GT per proposal by 3D IoU.

    Returns (iou (P,), gt_index (P,) with -1 where the class has no GT).
    """
    p = boxes.shape[0]
    iou = np.zeros(p, dtype=np.float64)
    gt_idx = np.full(p, -1, dtype=np.int64)
    if p == 0 or gt_boxes.shape[0] == 0:
        return iou, gt_idx
    full = kernels.iou_3d_matrix(
        np.ascontiguousarray(boxes, dtype=np.float64),
        np.ascontiguousarray(gt_boxes, dtype=np.float64),
    )
    same = labels[:, None] == gt_classes[None, :]
    full = np.where(same, full, -1.0)
    best = full.argmax(axis=1)
    best_iou = full[np.arange(p), best]
    found = best_iou >= 0
    iou[found] = best_iou[found]
    gt_idx[found] = best[found]
    return iou, gt_idx


def head_loss(head_out: dict, proposal_boxes: torch.Tensor,
              proposal_labels: torch.Tensor, batch_idx: torch.Tensor,
              scenes: list, cfg) -> dict:
    """BCE confidence against an IoU ramp plus smooth-L1 refinement on fg."""
    conf = head_out["conf"]
    reg = head_out["reg"]
    lo, hi = cfg.head.conf_iou_lo, cfg.head.conf_iou_hi
    ious = torch.zeros_like(conf)
    reg_targets = reg.new_zeros(reg.shape)
    fg = torch.zeros(conf.shape[0], dtype=torch.bool)
    for b, scene in enumerate(scenes):
        rows = (batch_idx == b).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            continue
        gt = scene.gt_boxes
        iou, gt_idx = match_proposals(
            proposal_boxes[rows].numpy().astype(np.float64),
            proposal_labels[rows].numpy(),
            gt,
            scene.gt_classes,
        )
        ious[rows] = torch.from_numpy(iou).float()
        is_fg = (iou >= cfg.head.reg_fg_iou) & (gt_idx >= 0)
        if is_fg.any():
            sel = np.nonzero(is_fg)[0]
            g = torch.from_numpy(gt[gt_idx[sel]]).float()
            t = encode_boxes(g, proposal_boxes[rows[sel]])
            # cuboids are pi-symmetric; regress the acute yaw residual
            t[:, 6] = torch.remainder(t[:, 6] + math.pi / 2, math.pi) - math.pi / 2
            reg_targets[rows[sel]] = t
            fg[rows[sel]] = True
    conf_target = ((ious - lo) / (hi - lo)).clamp(0.0, 1.0)
    loss_conf = F.binary_cross_entropy_with_logits(conf, conf_target)
    n_fg = fg.sum().clamp(min=1).to(conf.dtype)
    sl1 = F.smooth_l1_loss(
        reg, reg_targets, reduction="none", beta=cfg.rpn.smooth_l1_beta
    )
    loss_reg = (sl1.sum(-1) * fg).sum() / n_fg
    return {
        "head_conf": loss_conf,
        "head_reg": loss_reg,
        "head": loss_conf + loss_reg,
    }


def total_loss(rpn_terms: dict, head_terms: dict, rpg_terms: dict) -> dict:
    """Unit-weight sum of the three loss groups, with components for logging."""
    terms = {
        "rpn_cls": rpn_terms["rpn_cls"],
        "rpn_reg": rpn_terms["rpn_reg"],
        "head_conf": head_terms["head_conf"],
        "head_reg": head_terms["head_reg"],
        "score": rpg_terms["score"],
        "offset": rpg_terms["offset"],
    }
    terms["total"] = rpn_terms["rpn"] + head_terms["head"] + rpg_terms["rpg"]
    return terms


def assemble_detections(head_out: dict, proposal_boxes: torch.Tensor,
                        proposal_labels: torch.Tensor, batch_idx: torch.Tensor,
                        batch_size: int, cfg) -> list:
    """Decode refinements and run per-class BEV NMS; one dict per scene."""
    boxes = decode_boxes(head_out["reg"].detach(), proposal_boxes)
    boxes = torch.cat(
        [boxes[:, :6], wrap_angle_t(boxes[:, 6]).unsqueeze(1)], dim=1
    )
    confs = torch.sigmoid(head_out["conf"].detach())
    results = []
    for b in range(batch_size):
        rows = (batch_idx == b).nonzero(as_tuple=True)[0]
        bx = boxes[rows].numpy().astype(np.float64)
        sc = confs[rows].numpy().astype(np.float64)
        lb = proposal_labels[rows].numpy()
        keep_boxes, keep_scores, keep_labels = [], [], []
        for ci in range(len(cfg.rpn.anchors)):
            sel = np.nonzero((lb == ci) & (sc >= cfg.head.score_threshold))[0]
            if sel.size == 0:
                continue
            keep = nms_bev(bx[sel], sc[sel], cfg.head.final_nms_iou)
            keep_boxes.append(bx[sel[keep]])
            keep_scores.append(sc[sel[keep]])
            keep_labels.append(np.full(keep.size, ci, dtype=np.int64))
        if keep_boxes:
            results.append({
                "boxes": np.concatenate(keep_boxes, 0),
                "scores": np.concatenate(keep_scores, 0),
                "labels": np.concatenate(keep_labels, 0),
            })
        else:
            results.append({
                "boxes": np.zeros((0, 7)),
                "scores": np.zeros(0),
                "labels": np.zeros(0, dtype=np.int64),
            })
    return results
