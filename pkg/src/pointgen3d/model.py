"""End-to-end detector: voxel backbone, BEV proposal network, RoI grid
pooling, per-proposal point generation, and the refinement head.

Proposals reach the second stage detached; gradients flow into the backbone
through the pooled voxel features only. During training the ground-truth
boxes are appended to the proposal set so the refinement stages see
foreground RoIs from the first step.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .detect_head import (DetectionHead, assemble_detections, head_loss,
                          total_loss)
from .pointcloud import PointCloud, voxelize
from .roi_pool import RoIGridPool
from .rpg import RPGModule, TargetBank, rpg_loss
from .rpn import (BEVNetwork, VoxelBackbone, assign_anchor_targets,
                  build_anchors, generate_proposals, rpn_loss)
from .sparseconv import from_voxel_grids


def _flatten_proposals(proposals: list):
    """Concatenate per-scene proposal dicts into batch tensors."""
    boxes = torch.cat([p["boxes"] for p in proposals], dim=0)
    labels = torch.cat([p["labels"] for p in proposals], dim=0)
    scores = torch.cat([p["scores"] for p in proposals], dim=0)
    batch_idx = torch.cat([
        torch.full((p["boxes"].shape[0],), b, dtype=torch.int64)
        for b, p in enumerate(proposals)
    ])
    return boxes, labels, scores, batch_idx


class PGDetector(nn.Module):
    """Two-stage detector with point generation between the stages."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        anchors, anchor_class_ids = build_anchors(cfg)
        self.anchor_class_ids = anchor_class_ids
        self.register_buffer(
            "anchors", torch.from_numpy(anchors), persistent=False
        )
        self.backbone = VoxelBackbone(cfg)
        self.bev_net = BEVNetwork(cfg)
        self.roi_pool = RoIGridPool(cfg)
        self.rpg = RPGModule(cfg)
        self.head = DetectionHead(cfg)
        self.bank: TargetBank = None

    def encode(self, scenes: list):
        """Voxelize a batch of scenes and run the shared feature trunk."""
        v = self.cfg.voxels
        grids = [
            voxelize(
                PointCloud(s.points[:, :3], features=s.points[:, 3:]),
                v.range_min, v.voxel_size, v.spatial_shape,
                v.max_points_per_voxel,
            )
            for s in scenes
        ]
        st = from_voxel_grids(grids, v.range_min, v.voxel_size)
        stages = self.backbone(st)
        preds = self.bev_net(stages[4].bev())
        return stages, preds

    def _proposals(self, preds: dict, scenes: list, training: bool) -> list:
        proposals = generate_proposals(
            preds, self.anchors, self.anchor_class_ids, self.cfg, training
        )
        if training and self.cfg.train.append_gt_proposals:
            for p, scene in zip(proposals, scenes):
                m = scene.gt_boxes.shape[0]
                if m == 0:
                    continue
                p["boxes"] = torch.cat(
                    [p["boxes"], torch.from_numpy(scene.gt_boxes).float()]
                )
                p["labels"] = torch.cat(
                    [p["labels"], torch.from_numpy(scene.gt_classes)]
                )
                p["scores"] = torch.cat([p["scores"], p["scores"].new_ones(m)])
                p["anchor_ids"] = torch.cat(
                    [p["anchor_ids"], p["anchor_ids"].new_full((m,), -1)]
                )
        return proposals

    def _refine(self, stages: dict, proposals: list):
        """Second stage over flattened proposals. Returns rows aligned on N."""
        boxes, labels, scores, batch_idx = _flatten_proposals(proposals)
        pooled = self.roi_pool(stages, proposals)
        rpg_out = self.rpg(pooled["features"], pooled["points"], boxes)
        head_out = self.head(
            rpg_out["points"], rpg_out["f_se"], rpg_out["scores"], boxes
        )
        return {
            "boxes": boxes,
            "labels": labels,
            "proposal_scores": scores,
            "batch_idx": batch_idx,
            "rpg": rpg_out,
            "head": head_out,
        }

    def forward(self, scenes: list, training: bool = None):
        training = self.training if training is None else training
        stages, preds = self.encode(scenes)
        proposals = self._proposals(preds, scenes, training)
        out = self._refine(stages, proposals)
        out["rpn_preds"] = preds
        return out

    def losses(self, scenes: list) -> dict:
        """All training loss components for one batch of scenes."""
        out = self.forward(scenes, training=True)
        cls_t, reg_t = [], []
        anchors_np = self.anchors.numpy().astype(np.float64)
        for s in scenes:
            c, r = assign_anchor_targets(
                anchors_np, self.anchor_class_ids, s.gt_boxes, s.gt_classes,
                self.cfg,
            )
            cls_t.append(torch.from_numpy(c))
            reg_t.append(torch.from_numpy(r))
        rpn_terms = rpn_loss(
            out["rpn_preds"], torch.stack(cls_t), torch.stack(reg_t), self.cfg
        )
        rpg_terms = rpg_loss(
            out["rpg"], out["batch_idx"], out["boxes"], scenes, self.bank,
            self.cfg,
        )
        head_terms = head_loss(
            out["head"], out["boxes"], out["labels"], out["batch_idx"],
            scenes, self.cfg,
        )
        return total_loss(rpn_terms, head_terms, rpg_terms)

    @torch.no_grad()
    def predict(self, scenes: list) -> list:
        """Inference: one dict per scene with final boxes and the generated
        point cloud (positions + foreground scores) for export."""
        out = self.forward(scenes, training=False)
        dets = assemble_detections(
            out["head"], out["boxes"], out["labels"], out["batch_idx"],
            len(scenes), self.cfg,
        )
        pts = out["rpg"]["points"]
        scr = out["rpg"]["scores"]
        for b, det in enumerate(dets):
            rows = out["batch_idx"] == b
            det["gen_points"] = pts[rows].reshape(-1, 3).numpy()
            det["gen_scores"] = scr[rows].reshape(-1).numpy()
        return dets

    @torch.no_grad()
    def refine_boxes(self, scene, boxes: np.ndarray, labels: np.ndarray):
        """Run only the second stage on externally supplied boxes.

        Used by the misalignment probe: feed distorted boxes straight into
        RoI pooling and return the decoded refinements.
        """
        from .rpn import decode_boxes, wrap_angle_t

        stages, _ = self.encode([scene])
        proposals = [{
            "boxes": torch.from_numpy(boxes).float(),
            "labels": torch.from_numpy(labels),
            "scores": torch.ones(boxes.shape[0]),
            "anchor_ids": torch.full((boxes.shape[0],), -1, dtype=torch.int64),
        }]
        out = self._refine(stages, proposals)
        refined = decode_boxes(out["head"]["reg"], out["boxes"])
        refined = torch.cat(
            [refined[:, :6], wrap_angle_t(refined[:, 6]).unsqueeze(1)], dim=1
        )
        return refined.numpy().astype(np.float64)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
