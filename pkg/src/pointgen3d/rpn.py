"""Region proposal network: sparse voxel backbone, BEV head, anchors, losses.

Anchors live on the stage-4 BEV grid, one per (cell, class, yaw). Box residuals
use the diagonal-normalized encoding: center offsets divided by the anchor
diagonal (height for z), log size ratios, and a wrapped yaw difference trained
through a sin-difference transform. No direction bin is predicted; the second
stage re-regresses yaw from geometry, which resolves the pi ambiguity there.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .sparseconv import (
    SparseBatchNormReLU,
    SparseConv3d,
    SparseTensor,
    SubMConv3d,
)


def wrap_angle_t(x: torch.Tensor) -> torch.Tensor:
    """Torch twin of geometry.wrap_angle: wrap to [-pi, pi)."""
    return x - (2.0 * math.pi) * torch.floor((x + math.pi) / (2.0 * math.pi))


def downsampled_shape(shape, times: int) -> tuple:
    out = tuple(int(s) for s in shape)
    for _ in range(times):
        out = tuple((s - 1) // 2 + 1 for s in out)
    return out


def bev_grid_shape(cfg) -> tuple:
    sx, sy, _ = downsampled_shape(cfg.voxels.spatial_shape, 3)
    return sx, sy


def build_anchors(cfg) -> tuple:
    """Anchor boxes tiling the BEV grid.

    Returns (anchors (A, 7) float32, class_ids (A,) int64). Order is
    ix -> iy -> class -> yaw, matching the head's channel layout.
    """
    nx, ny = bev_grid_shape(cfg)
    cell_x = cfg.voxels.voxel_size[0] * 8
    cell_y = cfg.voxels.voxel_size[1] * 8
    x0, y0 = cfg.voxels.range_min[0], cfg.voxels.range_min[1]
    xs = x0 + (np.arange(nx, dtype=np.float64) + 0.5) * cell_x
    ys = y0 + (np.arange(ny, dtype=np.float64) + 0.5) * cell_y
    yaws = np.asarray(cfg.rpn.anchor_yaws, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    rows = []
    ids = []
    for ci, ac in enumerate(cfg.rpn.anchors):
        for yaw in yaws:
            a = np.zeros((nx, ny, 7), dtype=np.float64)
            a[..., 0] = gx
            a[..., 1] = gy
            a[..., 2] = ac.z_center
            a[..., 3:6] = ac.size
            a[..., 6] = yaw
            rows.append(a.reshape(-1, 7))
            ids.append(np.full(nx * ny, ci, dtype=np.int64))
    # Interleave so the per-cell order is class -> yaw.
    anchors = np.stack(rows, axis=1).reshape(-1, 7)
    class_ids = np.stack(ids, axis=1).reshape(-1)
    return anchors.astype(np.float32), class_ids


def encode_boxes(gt: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Residuals from anchor boxes to target boxes, both (..., 7)."""
    if (anchors[..., 3:6] <= 0).any() or (gt[..., 3:6] <= 0).any():
        raise ValueError("box dimensions must be positive")
    da = torch.sqrt(anchors[..., 3] ** 2 + anchors[..., 4] ** 2)
    dx = (gt[..., 0] - anchors[..., 0]) / da
    dy = (gt[..., 1] - anchors[..., 1]) / da
    dz = (gt[..., 2] - anchors[..., 2]) / anchors[..., 5]
    dl = torch.log(gt[..., 3] / anchors[..., 3])
    dw = torch.log(gt[..., 4] / anchors[..., 4])
    dh = torch.log(gt[..., 5] / anchors[..., 5])
    dt = wrap_angle_t(gt[..., 6] - anchors[..., 6])
    return torch.stack([dx, dy, dz, dl, dw, dh, dt], dim=-1)


def decode_boxes(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    da = torch.sqrt(anchors[..., 3] ** 2 + anchors[..., 4] ** 2)
    x = deltas[..., 0] * da + anchors[..., 0]
    y = deltas[..., 1] * da + anchors[..., 1]
    z = deltas[..., 2] * anchors[..., 5] + anchors[..., 2]
    l = torch.exp(deltas[..., 3]) * anchors[..., 3]
    w = torch.exp(deltas[..., 4]) * anchors[..., 4]
    h = torch.exp(deltas[..., 5]) * anchors[..., 5]
    t = wrap_angle_t(deltas[..., 6] + anchors[..., 6])
    return torch.stack([x, y, z, l, w, h, t], dim=-1)


def assign_anchor_targets(anchors, anchor_class_ids, gt_boxes, gt_classes, cfg):
    """Label anchors against ground truth of the same class.

    Returns (cls_target (A,) int64, reg_target (A, 7) float32).
    cls_target: -1 ignore, 0 background, c >= 1 foreground of class c - 1.
    Matching uses rotated BEV IoU; every ground-truth box claims its
    best-overlapping anchor so each GT keeps at least one foreground anchor.
    """
    A = anchors.shape[0]
    cls_target = np.zeros(A, dtype=np.int64)
    reg_target = np.zeros((A, 7), dtype=np.float32)
    if gt_boxes.shape[0] == 0:
        return cls_target, reg_target
    matched_gt = np.full(A, -1, dtype=np.int64)
    for ci, ac in enumerate(cfg.rpn.anchors):
        a_rows = np.nonzero(anchor_class_ids == ci)[0]
        g_rows = np.nonzero(gt_classes == ci)[0]
        if a_rows.size == 0 or g_rows.size == 0:
            continue
        iou = kernels.iou_bev_matrix(
            anchors[a_rows].astype(np.float64), gt_boxes[g_rows].astype(np.float64)
        )
        best_gt = iou.argmax(axis=1)
        best_iou = iou[np.arange(a_rows.size), best_gt]
        fg = best_iou >= ac.fg_iou
        ignore = (~fg) & (best_iou >= ac.bg_iou)
        cls_target[a_rows[ignore]] = -1
        cls_target[a_rows[fg]] = ci + 1
        matched_gt[a_rows[fg]] = g_rows[best_gt[fg]]
        for gi, ai in enumerate(iou.argmax(axis=0)):
            cls_target[a_rows[ai]] = ci + 1
            matched_gt[a_rows[ai]] = g_rows[gi]
    fg_rows = np.nonzero(cls_target > 0)[0]
    if fg_rows.size:
        g = torch.from_numpy(gt_boxes[matched_gt[fg_rows]].astype(np.float32))
        a = torch.from_numpy(anchors[fg_rows].astype(np.float32))
        reg_target[fg_rows] = encode_boxes(g, a).numpy()
    return cls_target, reg_target


def nms_bev(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
            pre_max: int = 0, post_max: int = 0) -> np.ndarray:
    """Greedy rotated-BEV NMS. Ties in score keep the lower index first.

    A candidate is suppressed when its IoU with a kept box exceeds the
    threshold (boundary-equal overlap survives).
    """
    order = np.argsort(-scores, kind="stable")
    if pre_max and order.size > pre_max:
        order = order[:pre_max]
    if order.size == 0:
        return order.astype(np.int64)
    cand = boxes[order].astype(np.float64)
    iou = kernels.iou_bev_matrix(cand, cand)
    keep = []
    alive = np.ones(order.size, dtype=bool)
    for i in range(order.size):
        if not alive[i]:
            continue
        keep.append(order[i])
        if post_max and len(keep) >= post_max:
            break
        alive[i + 1:] &= iou[i, i + 1:] <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def sigmoid_focal(logits: torch.Tensor, targets: torch.Tensor,
                  alpha: float, gamma: float) -> torch.Tensor:
    """Elementwise focal term alpha * (1 - p_t)^gamma * BCE(p, t).

    alpha scales uniformly, so gamma=0 and alpha=1 reduce exactly to binary
    cross-entropy.
    """
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    return alpha * (1 - p_t) ** gamma * ce


def rpn_loss(preds: dict, cls_target: torch.Tensor, reg_target: torch.Tensor,
             cfg) -> dict:
    """Focal classification + smooth-L1 regression with sin-encoded yaw.

    cls_target: (B, A) with -1 ignore / 0 background / c >= 1 foreground.
    Both terms are normalized by the batch-wide foreground count (min 1).
    """
    cls_pred = preds["cls"]
    b, a, n_cls = cls_pred.shape
    valid = cls_target >= 0
    fg = cls_target > 0
    n_fg = fg.sum().clamp(min=1).to(cls_pred.dtype)

    one_hot = cls_pred.new_zeros(b, a, n_cls)
    fg_idx = (cls_target.clamp(min=1) - 1).unsqueeze(-1)
    one_hot.scatter_(-1, fg_idx, fg.unsqueeze(-1).to(cls_pred.dtype))
    focal = sigmoid_focal(cls_pred, one_hot, cfg.rpn.focal_alpha,
                          cfg.rpn.focal_gamma)
    loss_cls = (focal * valid.unsqueeze(-1)).sum() / n_fg

    reg_pred = preds["reg"]
    sin_p = torch.sin(reg_pred[..., 6]) * torch.cos(reg_target[..., 6])
    sin_t = torch.cos(reg_pred[..., 6]) * torch.sin(reg_target[..., 6])
    reg_p = torch.cat([reg_pred[..., :6], sin_p.unsqueeze(-1)], dim=-1)
    reg_t = torch.cat([reg_target[..., :6], sin_t.unsqueeze(-1)], dim=-1)
    sl1 = F.smooth_l1_loss(reg_p, reg_t, reduction="none", beta=cfg.rpn.smooth_l1_beta)
    loss_reg = (sl1.sum(-1) * fg).sum() / n_fg
    return {"rpn_cls": loss_cls, "rpn_reg": loss_reg, "rpn": loss_cls + loss_reg}


class VoxelBackbone(nn.Module):
    """Four sparse conv stages; stage 1 keeps full resolution, 2-4 halve it."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.backbone.stage_channels
        self.stage1 = nn.ModuleList([
            SubMConv3d(4, c[0]), SparseBatchNormReLU(c[0]),
            SubMConv3d(c[0], c[0]), SparseBatchNormReLU(c[0]),
        ])
        stages = []
        for i in range(1, 4):
            stages.append(nn.ModuleList([
                SparseConv3d(c[i - 1], c[i]), SparseBatchNormReLU(c[i]),
                SubMConv3d(c[i], c[i]), SparseBatchNormReLU(c[i]),
                SubMConv3d(c[i], c[i]), SparseBatchNormReLU(c[i]),
            ]))
        self.stage2, self.stage3, self.stage4 = stages

    @staticmethod
    def _run(blocks, st):
        for block in blocks:
            st = block(st)
        return st

    def forward(self, st: SparseTensor) -> dict:
        out = {1: self._run(self.stage1, st)}
        out[2] = self._run(self.stage2, out[1])
        out[3] = self._run(self.stage3, out[2])
        out[4] = self._run(self.stage4, out[3])
        return out


class BEVNetwork(nn.Module):
    """2D conv tower over the flattened stage-4 volume, plus anchor heads."""

    def __init__(self, cfg):
        super().__init__()
        _, _, sz = downsampled_shape(cfg.voxels.spatial_shape, 3)
        in_ch = cfg.backbone.stage_channels[3] * sz
        c1, c2 = cfg.backbone.bev_channels
        n = cfg.backbone.bev_convs_per_block

        def block(cin, cout, count, stride):
            layers = [
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(cout, eps=1e-3, momentum=0.01),
                nn.ReLU(),
            ]
            for _ in range(count - 1):
                layers += [
                    nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                    nn.BatchNorm2d(cout, eps=1e-3, momentum=0.01),
                    nn.ReLU(),
                ]
            return nn.Sequential(*layers)

        self.block1 = block(in_ch, c1, n, stride=1)
        self.block2 = block(c1, c2, n, stride=2)
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(c2, c1, 2, stride=2, bias=False),
            nn.BatchNorm2d(c1, eps=1e-3, momentum=0.01),
            nn.ReLU(),
        )
        fused = 2 * c1
        n_cls = len(cfg.rpn.anchors)
        n_anchor = n_cls * len(cfg.rpn.anchor_yaws)
        self.n_cls = n_cls
        self.n_anchor = n_anchor
        self.cls_head = nn.Conv2d(fused, n_anchor * n_cls, 1)
        self.reg_head = nn.Conv2d(fused, n_anchor * 7, 1)
        nn.init.constant_(self.cls_head.bias, -math.log((1 - 0.01) / 0.01))

    def forward(self, bev: torch.Tensor) -> dict:
        x1 = self.block1(bev)
        x2 = self.up2(self.block2(x1))
        x = torch.cat([x1, x2], dim=1)
        b = x.shape[0]

        def flat(t, width):
            return t.permute(0, 2, 3, 1).reshape(b, -1, width)

        return {
            "cls": flat(self.cls_head(x), self.n_cls),
            "reg": flat(self.reg_head(x), 7),
        }


def generate_proposals(preds: dict, anchors_t: torch.Tensor,
                       anchor_class_ids: np.ndarray, cfg, training: bool) -> list:
    """Decode, rank, and NMS-filter anchor predictions into proposals.

    Returns one dict per scene with boxes (P, 7), scores (P,), labels (P,),
    and anchor_ids (P,), all detached: the second stage refines from shared
    feature volumes, not through proposal coordinates.
    """
    pre = cfg.rpn.train_pre_nms if training else cfg.rpn.infer_pre_nms
    post = cfg.rpn.train_post_nms if training else cfg.rpn.infer_post_nms
    class_ids_t = torch.from_numpy(anchor_class_ids)
    out = []
    for i in range(preds["cls"].shape[0]):
        scores_all = torch.sigmoid(preds["cls"][i].detach())
        # Each anchor row is class-specific; read its own class channel.
        score = scores_all.gather(1, class_ids_t.unsqueeze(1)).squeeze(1)
        take = min(pre, score.shape[0])
        top_score, top_idx = torch.topk(score, take)
        boxes = decode_boxes(preds["reg"][i].detach()[top_idx], anchors_t[top_idx])
        keep = nms_bev(
            boxes.numpy().astype(np.float64),
            top_score.numpy().astype(np.float64),
            cfg.rpn.nms_iou,
            post_max=post,
        )
        keep_t = torch.from_numpy(keep)
        sel = top_idx[keep_t]
        out.append({
            "boxes": boxes[keep_t],
            "scores": top_score[keep_t],
            "labels": class_ids_t[sel],
            "anchor_ids": sel,
        })
    return out
