"""Second-stage head: canonical spatial input, set abstraction invariances,
confidence/refinement losses, and detection assembly."""

from types import SimpleNamespace

import numpy as np
import torch
import torch.nn.functional as F

from pointgen3d.config import desk_config
from pointgen3d.detect_head import (DetectionHead, SetAbstraction,
                                    assemble_detections, canonical_points,
                                    head_loss, local_spatial_input,
                                    match_proposals, total_loss)
from pointgen3d.rpn import encode_boxes


def test_canonical_points_inverts_pose():
    rng = np.random.default_rng(0)
    local = torch.from_numpy(rng.uniform(-2, 2, (1, 20, 3))).float()
    yaw = 0.7
    c, s = np.cos(yaw), np.sin(yaw)
    rot = torch.tensor([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).float()
    center = torch.tensor([4.0, -1.0, 2.0])
    world = local @ rot.T + center
    box = torch.tensor([[4.0, -1.0, 2.0, 3.0, 2.0, 1.5, yaw]])
    back = canonical_points(world, box)
    assert torch.allclose(back, local, atol=1e-5)


def test_local_spatial_input_width_and_content():
    points = torch.tensor([[[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]]])
    boxes = torch.tensor([[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]])
    scores = torch.tensor([[0.25, 0.75]])
    out = local_spatial_input(points, boxes, scores)
    assert out.shape == (1, 2, 5)
    # yaw is zero, so canonical coords equal the raw offsets
    assert torch.allclose(out[0, 0, :3], points[0, 0])
    assert torch.allclose(out[0, :, 3], torch.tensor([5.0, 2.0]))
    assert torch.allclose(out[0, :, 4], scores[0])


def _sa(in_ch=4, out_ch=8, radius=0.5, cap=0, seed=0):
    torch.manual_seed(seed)
    return SetAbstraction(in_ch, out_ch, radius, cap)


def test_set_abstraction_permutation_invariance():
    sa = _sa()
    rng = np.random.default_rng(1)
    coords = torch.from_numpy(rng.uniform(-1, 1, (2, 12, 3))).float()
    feats = torch.from_numpy(rng.normal(0, 1, (2, 12, 4))).float()
    out = sa(coords, feats)
    perm = torch.from_numpy(rng.permutation(12))
    out_p = sa(coords[:, perm], feats[:, perm])
    assert torch.equal(out_p, out[:, perm])


def test_set_abstraction_duplication_invariance():
    # uncapped groups max-pool, so duplicating any point changes nothing
    # at the original centroids and copies the twin's output
    sa = _sa()
    rng = np.random.default_rng(2)
    coords = torch.from_numpy(rng.uniform(-1, 1, (1, 10, 3))).float()
    feats = torch.from_numpy(rng.normal(0, 1, (1, 10, 4))).float()
    out = sa(coords, feats)
    coords_d = torch.cat([coords, coords[:, 3:4]], dim=1)
    feats_d = torch.cat([feats, feats[:, 3:4]], dim=1)
    out_d = sa(coords_d, feats_d)
    assert torch.equal(out_d[:, :10], out)
    assert torch.equal(out_d[:, 10], out[:, 3])


def test_set_abstraction_radius_isolates_clusters():
    sa = _sa(radius=0.3)
    rng = np.random.default_rng(3)
    near = rng.uniform(-0.1, 0.1, (1, 5, 3))
    far = rng.uniform(-0.1, 0.1, (1, 5, 3)) + 5.0
    coords = torch.from_numpy(np.concatenate([near, far], axis=1)).float()
    feats = torch.from_numpy(rng.normal(0, 1, (1, 10, 4))).float()
    out_a = sa(coords, feats)
    feats_b = feats.clone()
    feats_b[:, 5:] += 3.0  # only the far cluster changes
    out_b = sa(coords, feats_b)
    assert torch.equal(out_a[:, :5], out_b[:, :5])
    assert not torch.allclose(out_a[:, 5:], out_b[:, 5:])


def test_set_abstraction_group_cap_one_is_self_feature():
    sa = _sa(cap=1)
    rng = np.random.default_rng(4)
    coords = torch.from_numpy(rng.uniform(-1, 1, (1, 6, 3))).float()
    feats = torch.from_numpy(rng.normal(0, 1, (1, 6, 4))).float()
    out = sa(coords, feats)
    self_in = torch.cat([torch.zeros(1, 6, 3), feats], dim=-1)
    want = torch.relu(sa.lin2(torch.relu(sa.lin1(self_in))))
    assert torch.allclose(out, want, atol=1e-6)


def _head(cfg=None):
    cfg = cfg or desk_config()
    torch.manual_seed(0)
    return DetectionHead(cfg), cfg


def _head_inputs(cfg, n=3, p=16, seed=5):
    rng = np.random.default_rng(seed)
    points = torch.from_numpy(rng.uniform(-2, 2, (n, p, 3))).float()
    f_se = torch.from_numpy(
        rng.normal(0, 1, (n, p, cfg.rpg.semantic_dim))
    ).float()
    scores = torch.from_numpy(rng.uniform(0, 1, (n, p))).float()
    boxes = torch.from_numpy(np.column_stack([
        rng.uniform(-1, 1, (n, 3)),
        rng.uniform(1.0, 3.0, (n, 3)),
        rng.uniform(-np.pi, np.pi, (n, 1)),
    ])).float()
    return points, f_se, scores, boxes


def test_head_output_shapes():
    head, cfg = _head()
    points, f_se, scores, boxes = _head_inputs(cfg)
    out = head(points, f_se, scores, boxes)
    assert out["conf"].shape == (3,)
    assert out["reg"].shape == (3, 7)
    assert out["f_r"].shape == (3, cfg.head.roi_feature_dim)


def test_head_point_permutation_invariance():
    head, cfg = _head()
    points, f_se, scores, boxes = _head_inputs(cfg)
    out = head(points, f_se, scores, boxes)
    perm = torch.randperm(points.shape[1])
    out_p = head(points[:, perm], f_se[:, perm], scores[:, perm], boxes)
    assert torch.equal(out_p["conf"], out["conf"])
    assert torch.equal(out_p["reg"], out["reg"])


def test_head_point_duplication_invariance():
    head, cfg = _head()
    points, f_se, scores, boxes = _head_inputs(cfg)
    out = head(points, f_se, scores, boxes)
    dup = lambda t: torch.cat([t, t[:, 2:3]], dim=1)
    out_d = head(dup(points), dup(f_se), dup(scores), boxes)
    assert torch.allclose(out_d["conf"], out["conf"], atol=1e-6)
    assert torch.allclose(out_d["reg"], out["reg"], atol=1e-6)


def test_match_proposals_same_class_only():
    boxes = np.array([[0.0, 0, 0, 2, 2, 2, 0.0],
                      [5.0, 0, 0, 2, 2, 2, 0.0]])
    labels = np.array([0, 1])
    gt = np.array([[0.0, 0, 0, 2, 2, 2, 0.0],
                   [5.5, 0, 0, 2, 2, 2, 0.0]])
    gt_cls = np.array([0, 0])
    iou, idx = match_proposals(boxes, labels, gt, gt_cls)
    assert np.isclose(iou[0], 1.0) and idx[0] == 0
    # class-1 proposal has no class-1 GT
    assert iou[1] == 0.0 and idx[1] == -1
    iou2, idx2 = match_proposals(boxes, np.array([0, 0]), gt, gt_cls)
    assert idx2[1] == 1 and iou2[1] > 0.5


def test_match_proposals_empty_inputs():
    iou, idx = match_proposals(
        np.zeros((0, 7)), np.zeros(0, dtype=np.int64),
        np.zeros((2, 7)), np.zeros(2, dtype=np.int64),
    )
    assert iou.shape == (0,) and idx.shape == (0,)
    iou, idx = match_proposals(
        np.array([[0.0, 0, 0, 1, 1, 1, 0.0]]), np.array([0]),
        np.zeros((0, 7)), np.zeros(0, dtype=np.int64),
    )
    assert iou[0] == 0.0 and idx[0] == -1


def _scene(gt_boxes, gt_classes):
    return SimpleNamespace(
        gt_boxes=np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7),
        gt_classes=np.asarray(gt_classes, dtype=np.int64),
    )


def test_head_loss_perfect_predictions_near_zero():
    cfg = desk_config()
    gt = [[1.0, 0.5, 0.0, 2.0, 2.0, 1.5, 0.3]]
    scene = _scene(gt, [0])
    prop = torch.tensor(gt).float()
    head_out = {"conf": torch.tensor([20.0]), "reg": torch.zeros(1, 7)}
    out = head_loss(head_out, prop, torch.tensor([0]), torch.tensor([0]),
                    [scene], cfg)
    assert float(out["head_conf"]) < 1e-6
    assert float(out["head_reg"]) == 0.0
    assert torch.allclose(out["head"], out["head_conf"] + out["head_reg"])


def test_head_loss_conf_ramp_value():
    cfg = desk_config()
    # x-shift of 2/3 on a 2x2x2 cube gives IoU exactly 0.5
    gt = [[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]]
    scene = _scene(gt, [0])
    prop = torch.tensor([[2.0 / 3.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]])
    head_out = {"conf": torch.tensor([0.0]), "reg": torch.zeros(1, 7)}
    out = head_loss(head_out, prop, torch.tensor([0]), torch.tensor([0]),
                    [scene], cfg)
    # target = (0.5 - lo) / (hi - lo) = 0.5, so BCE at logit 0 is ln 2
    np.testing.assert_allclose(float(out["head_conf"]), np.log(2.0), rtol=1e-5)
    # IoU 0.5 sits below the refinement threshold: no reg term
    assert float(out["head_reg"]) == 0.0


def test_head_loss_reg_matches_codec_target():
    cfg = desk_config()
    gt = np.array([[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]])
    scene = _scene(gt, [0])
    prop = torch.tensor([[0.5, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]])  # IoU 0.6
    head_out = {"conf": torch.tensor([0.0]), "reg": torch.zeros(1, 7)}
    out = head_loss(head_out, prop, torch.tensor([0]), torch.tensor([0]),
                    [scene], cfg)
    target = encode_boxes(torch.from_numpy(gt).float(), prop)
    want = F.smooth_l1_loss(
        torch.zeros(1, 7), target, reduction="none",
        beta=cfg.rpn.smooth_l1_beta,
    ).sum()
    np.testing.assert_allclose(float(out["head_reg"]), float(want), rtol=1e-5)


def test_head_loss_yaw_target_is_acute():
    # a pi-flipped proposal occupies the same cuboid: zero yaw residual
    cfg = desk_config()
    gt = np.array([[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.3]])
    scene = _scene(gt, [0])
    prop = torch.tensor([[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.3 - np.pi]])
    head_out = {"conf": torch.tensor([0.0]), "reg": torch.zeros(1, 7)}
    out = head_loss(head_out, prop, torch.tensor([0]), torch.tensor([0]),
                    [scene], cfg)
    np.testing.assert_allclose(float(out["head_reg"]), 0.0, atol=1e-6)


def test_head_loss_wrong_class_is_background():
    cfg = desk_config()
    gt = [[0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]]
    scene = _scene(gt, [0])
    prop = torch.tensor(gt).float()
    head_out = {"conf": torch.tensor([0.0]), "reg": torch.ones(1, 7)}
    out = head_loss(head_out, prop, torch.tensor([1]), torch.tensor([0]),
                    [scene], cfg)
    # conf target 0 at logit 0 is ln 2; reg has no foreground rows
    np.testing.assert_allclose(float(out["head_conf"]), np.log(2.0), rtol=1e-5)
    assert float(out["head_reg"]) == 0.0


def test_total_loss_sums_components():
    mk = lambda v: torch.tensor(float(v))
    rpn = {"rpn_cls": mk(0.1), "rpn_reg": mk(0.2), "rpn": mk(0.3)}
    head = {"head_conf": mk(0.4), "head_reg": mk(0.5), "head": mk(0.9)}
    rpg = {"score": mk(0.05), "offset": mk(0.15), "rpg": mk(0.2)}
    out = total_loss(rpn, head, rpg)
    np.testing.assert_allclose(float(out["total"]), 1.4, rtol=1e-7)
    for k in ("rpn_cls", "rpn_reg", "head_conf", "head_reg", "score", "offset"):
        assert k in out


def _logit(p):
    return float(np.log(p / (1.0 - p)))


def test_assemble_decodes_and_thresholds():
    cfg = desk_config()
    props = torch.tensor([
        [2.0, 1.0, 0.0, 2.0, 2.0, 1.5, 0.4],
        [8.0, 3.0, 0.5, 2.0, 2.0, 1.5, -0.2],
    ])
    head_out = {
        "reg": torch.zeros(2, 7),
        "conf": torch.tensor([_logit(0.9), _logit(0.02)]),
    }
    dets = assemble_detections(
        head_out, props, torch.tensor([0, 0]), torch.tensor([0, 0]), 1, cfg
    )
    assert len(dets) == 1
    out = dets[0]
    # zero refinement keeps the proposal box; the low score is cut
    assert out["boxes"].shape == (1, 7)
    np.testing.assert_allclose(out["boxes"][0], props[0].numpy(), atol=1e-6)
    np.testing.assert_allclose(out["scores"][0], 0.9, atol=1e-6)
    assert out["labels"].tolist() == [0]


def test_assemble_per_class_nms():
    cfg = desk_config(num_classes=2)
    box = [2.0, 1.0, 0.0, 2.0, 2.0, 1.5, 0.0]
    props = torch.tensor([box, box, box])
    head_out = {
        "reg": torch.zeros(3, 7),
        "conf": torch.tensor([_logit(0.8), _logit(0.6), _logit(0.7)]),
    }
    # duplicates within a class collapse to the top score; the other class
    # survives independently
    dets = assemble_detections(
        head_out, props, torch.tensor([0, 0, 1]), torch.tensor([0, 0, 0]),
        1, cfg,
    )
    out = dets[0]
    assert sorted(out["labels"].tolist()) == [0, 1]
    got = {int(l): float(s) for l, s in zip(out["labels"], out["scores"])}
    np.testing.assert_allclose(got[0], 0.8, atol=1e-6)
    np.testing.assert_allclose(got[1], 0.7, atol=1e-6)


def test_assemble_batch_routing_and_empty():
    cfg = desk_config()
    props = torch.tensor([
        [2.0, 1.0, 0.0, 2.0, 2.0, 1.5, 0.0],
        [6.0, -2.0, 0.0, 2.0, 2.0, 1.5, 0.0],
    ])
    head_out = {
        "reg": torch.zeros(2, 7),
        "conf": torch.tensor([_logit(0.9), _logit(0.8)]),
    }
    dets = assemble_detections(
        head_out, props, torch.tensor([0, 0]), torch.tensor([0, 1]), 3, cfg
    )
    assert len(dets) == 3
    assert dets[0]["boxes"].shape == (1, 7)
    assert dets[1]["boxes"].shape == (1, 7)
    assert dets[2]["boxes"].shape == (0, 7)
    assert dets[2]["scores"].shape == (0,)


def test_assemble_wraps_refined_yaw():
    cfg = desk_config()
    props = torch.tensor([[2.0, 1.0, 0.0, 2.0, 2.0, 1.5, 3.0]])
    reg = torch.zeros(1, 7)
    reg[0, 6] = 1.0  # decoded yaw 4.0 wraps negative
    head_out = {"reg": reg, "conf": torch.tensor([_logit(0.9)])}
    dets = assemble_detections(
        head_out, props, torch.tensor([0]), torch.tensor([0]), 1, cfg
    )
    yaw = dets[0]["boxes"][0, 6]
    assert -np.pi <= yaw <= np.pi
    np.testing.assert_allclose(yaw, 4.0 - 2 * np.pi, atol=1e-5)
