"""Detection evaluation: greedy confidence-ordered matching and AP at 40
interpolated recall positions, with optional difficulty stratification.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def match_frame(det_boxes: np.ndarray, det_scores: np.ndarray,
                gt_boxes: np.ndarray, iou_threshold: float,
                ignored_gt: np.ndarray = None):
    """Greedy matching for one frame and one class.

    Detections are visited in descending score order (ties keep input order);
    each claims the unmatched GT with the highest IoU >= threshold, lowest
    index on ties. Detections whose best remaining match is an ignored GT are
    dropped from scoring entirely (neither TP nor FP).

    Returns (tp (D,) bool, drop (D,) bool) in the original detection order.
    """
    d = det_boxes.shape[0]
    m = gt_boxes.shape[0]
    tp = np.zeros(d, dtype=bool)
    drop = np.zeros(d, dtype=bool)
    if d == 0:
        return tp, drop
    if ignored_gt is None:
        ignored_gt = np.zeros(m, dtype=bool)
    order = np.argsort(-det_scores, kind="stable")
    if m == 0:
        return tp, drop
    iou = kernels.iou_3d_matrix(
        np.ascontiguousarray(det_boxes.astype(np.float64)),
        np.ascontiguousarray(gt_boxes.astype(np.float64)),
    )
    taken = np.zeros(m, dtype=bool)
    for di in order:
        cand = iou[di].copy()
        cand[taken] = -1.0
        valid = cand.copy()
        valid[ignored_gt] = -1.0
        gi = int(valid.argmax())
        if valid[gi] >= iou_threshold:
            taken[gi] = True
            tp[di] = True
            continue
        cand[~ignored_gt] = -1.0
        gi = int(cand.argmax())
        if cand[gi] >= iou_threshold:
            taken[gi] = True
            drop[di] = True
    return tp, drop


def ap_r40(scores: np.ndarray, tp: np.ndarray, n_gt: int,
           positions: int = 40) -> float:
    """Average precision over evenly spaced recall positions.

    scores/tp: all scored detections pooled across frames.
    Precision at recall r is the maximum precision among operating points
    whose recall is >= r, zero when recall r is never reached.
    """
    if n_gt == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_c = np.cumsum(tp[order].astype(np.float64))
    fp_c = np.cumsum((~tp[order]).astype(np.float64))
    recall = tp_c / n_gt
    precision = tp_c / np.maximum(tp_c + fp_c, 1e-12)
    total = 0.0
    for i in range(1, positions + 1):
        r = i / positions
        ok = recall >= r - 1e-12
        total += precision[ok].max() if ok.any() else 0.0
    return total / positions


def evaluate_class(frames: list, class_id: int, iou_threshold: float,
                   positions: int = 40, max_difficulty: int = None) -> float:
    """AP for one class over a list of frames.

    frames: dicts with det_boxes (D, 7), det_scores (D,), det_labels (D,),
    gt_boxes (M, 7), gt_classes (M,), and optionally gt_difficulty (M,).
    With max_difficulty set, harder or unrated GT is ignored: it cannot be
    missed, and detections matching it are dropped from scoring.
    """
    all_scores, all_tp = [], []
    n_gt = 0
    for fr in frames:
        det_sel = fr["det_labels"] == class_id
        dboxes = fr["det_boxes"][det_sel]
        dscores = fr["det_scores"][det_sel]
        gt_sel = fr["gt_classes"] == class_id
        gboxes = fr["gt_boxes"][gt_sel]
        if max_difficulty is not None and "gt_difficulty" in fr:
            diff = fr["gt_difficulty"][gt_sel]
            ignored = (diff < 0) | (diff > max_difficulty)
        else:
            ignored = np.zeros(gboxes.shape[0], dtype=bool)
        n_gt += int((~ignored).sum())
        tp, drop = match_frame(dboxes, dscores, gboxes, iou_threshold, ignored)
        keep = ~drop
        all_scores.append(dscores[keep])
        all_tp.append(tp[keep])
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    return ap_r40(scores, tp, n_gt, positions)


def evaluate_detections(frames: list, class_names, iou_thresholds: dict,
                        positions: int = 40, difficulties=None) -> dict:
    """AP per class (and per difficulty level when requested)."""
    out = {}
    for ci, name in enumerate(class_names):
        thr = iou_thresholds[name]
        if difficulties:
            for d in difficulties:
                out[f"{name}_d{d}"] = evaluate_class(
                    frames, ci, thr, positions, max_difficulty=d
                )
        out[name] = evaluate_class(frames, ci, thr, positions)
    return out


def detections_to_frames(scenes, dets) -> list:
    """Pair model predictions with scene ground truth for evaluation."""
    frames = []
    for scene, det in zip(scenes, dets):
        frames.append({
            "det_boxes": np.asarray(det["boxes"], dtype=np.float64).reshape(-1, 7),
            "det_scores": np.asarray(det["scores"], dtype=np.float64).reshape(-1),
            "det_labels": np.asarray(det["labels"], dtype=np.int64).reshape(-1),
            "gt_boxes": scene.gt_boxes,
            "gt_classes": scene.gt_classes,
            "gt_difficulty": scene.difficulty,
        })
    return frames
