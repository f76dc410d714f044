"""Command-line entry points: train, eval, infer, probe-misaligned,
build-targets, synth-data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import load_checkpoint, read_checkpoint
from .config import Config, desk_config
from .data import (CLASS_NAMES, KITTI_TYPE_OF_CLASS, SynthSpec, load_frame,
                   read_calib, read_split, synth_scene, write_kitti_frame,
                   write_split)
from .geometry import wrap_angle
from .kernels import iou_3d_matrix
from .model import PGDetector, parameter_count
from .rpg import TargetBank
from .training import Trainer, evaluate_model, seed_everything

log = logging.getLogger("pointgen3d")


def _load_config(args) -> Config:
    if args.config:
        cfg = Config.load(args.config)
    else:
        cfg = desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _config_from_checkpoint(path: str, args) -> Config:
    if args.config:
        return _load_config(args)
    _, cfg_yaml, _ = read_checkpoint(path)
    cfg = Config.from_yaml(cfg_yaml)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    return cfg


def _load_scenes(root: str, split: str, cfg) -> list:
    return [
        data_mod.filter_scene_to_range(load_frame(root, fid), cfg)
        for fid in read_split(root, split)
    ]


def _bank_for(root: str, cfg, out: str = None) -> TargetBank:
    bank_dir = out or os.path.join(root, "target_bank")
    index = os.path.join(bank_dir, "index.txt")
    class_names = [a.name for a in cfg.rpn.anchors]
    if os.path.exists(index):
        return TargetBank.load(bank_dir, class_names)
    bank = data_mod.build_target_bank(root, "train", cfg)
    bank.save(bank_dir)
    return bank


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    spec = SynthSpec(
        n_objects=args.objects,
        class_mix=tuple(
            1.0 if i < len(cfg.rpn.anchors) else 0.0 for i in range(3)
        ),
        clutter_points=args.clutter,
    )
    root = args.data_root
    n_val = max(1, args.frames // 5)
    train_ids, val_ids = [], []
    for i in range(args.frames + n_val):
        scene = synth_scene(spec, cfg, seed=cfg.seed * 100003 + i,
                            frame_id=f"{i:06d}")
        write_kitti_frame(root, scene)
        (train_ids if i < args.frames else val_ids).append(scene.frame_id)
    write_split(root, "train", train_ids)
    write_split(root, "val", val_ids)
    print(f"wrote {len(train_ids)} train + {len(val_ids)} val frames to {root}")
    return 0


def cmd_build_targets(args) -> int:
    cfg = _load_config(args)
    bank = data_mod.build_target_bank(args.data_root, "train", cfg)
    for name in (a.name for a in cfg.rpn.anchors):
        ci = CLASS_NAMES.index(name)
        if not any(r.class_id == ci for r in bank.records.values()):
            log.warning("class %s has no instances in the bank, skipped", name)
    out = args.out or os.path.join(args.data_root, "target_bank")
    bank.save(out)
    print(f"bank: {len(bank.records)} instances, {len(bank.targets)} targets "
          f"-> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    scenes = _load_scenes(args.data_root, "train", cfg)
    bank = _bank_for(args.data_root, cfg)
    out = args.out or "runs/default"
    trainer = Trainer(cfg, scenes, bank, out_dir=out, max_steps=args.max_steps)
    print(f"model parameters: {parameter_count(trainer.model)}")
    print(f"training {len(scenes)} frames for {trainer.total_steps} steps")
    trainer.fit(print_every=args.print_every)
    metrics = trainer.evaluate(scenes)
    for name, ap in sorted(metrics.items()):
        print(f"train AP_R40 {name}: {ap:.4f}")
    print(f"checkpoints and logs in {out}")
    return 0


def _build_model(ckpt_path: str, cfg) -> PGDetector:
    seed_everything(cfg.seed, cfg.deterministic)
    model = PGDetector(cfg)
    load_checkpoint(ckpt_path, model)
    model.eval()
    return model


def cmd_eval(args) -> int:
    cfg = _config_from_checkpoint(args.checkpoint, args)
    model = _build_model(args.checkpoint, cfg)
    scenes = _load_scenes(args.data_root, args.split, cfg)
    metrics = evaluate_model(model, cfg, scenes)
    has_difficulty = any(
        s.difficulty.size and (s.difficulty >= 0).any() for s in scenes
    )
    if has_difficulty:
        from .metrics import detections_to_frames, evaluate_detections

        frames = []
        for i in range(0, len(scenes), cfg.train.batch_size):
            chunk = scenes[i:i + cfg.train.batch_size]
            frames.extend(detections_to_frames(chunk, model.predict(chunk)))
        metrics.update(evaluate_detections(
            frames, [a.name for a in cfg.rpn.anchors],
            cfg.eval.iou_thresholds, cfg.eval.recall_positions,
            difficulties=(0, 1, 2),
        ))
    for name, ap in sorted(metrics.items()):
        print(f"AP_R40 {name}: {ap:.4f}")
    return 0


def _result_lines(det: dict, calib: dict) -> list:
    cam_from_velo = np.eye(4)
    cam_from_velo[:3, :] = calib["Tr_velo_to_cam"]
    r0 = np.eye(4)
    r0[:3, :3] = calib["R0_rect"]
    cam_from_velo = r0 @ cam_from_velo
    lines = []
    for box, score, ci in zip(det["boxes"], det["scores"], det["labels"]):
        cx, cy, cz, l, w, h, yaw = box
        bottom = np.asarray([cx, cy, cz - h / 2.0, 1.0])
        loc = (cam_from_velo @ bottom)[:3]
        ry = wrap_angle(-yaw - np.pi / 2.0)
        alpha = wrap_angle(ry - np.arctan2(loc[0], max(loc[2], 1e-3)))
        name = KITTI_TYPE_OF_CLASS[CLASS_NAMES[int(ci)]]
        lines.append(
            f"{name} 0.00 0 {alpha:.2f} 350.00 150.00 450.00 250.00 "
            f"{h:.6f} {w:.6f} {l:.6f} "
            f"{loc[0]:.6f} {loc[1]:.6f} {loc[2]:.6f} {ry:.6f} {score:.6f}"
        )
    return lines


def write_ply(path: str, points: np.ndarray, scores: np.ndarray) -> None:
    """ASCII PLY with per-vertex foreground score."""
    with open(path, "w") as fh:
        fh.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {points.shape[0]}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property float score\nend_header\n"
        )
        for p, s in zip(points, scores):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {s:.6f}\n")


def cmd_infer(args) -> int:
    cfg = _config_from_checkpoint(args.checkpoint, args)
    model = _build_model(args.checkpoint, cfg)
    frame_ids = (
        args.frames.split(",") if args.frames
        else read_split(args.data_root, args.split)
    )
    out = args.out or "inference"
    os.makedirs(os.path.join(out, "detections"), exist_ok=True)
    if args.export_points:
        os.makedirs(os.path.join(out, "points"), exist_ok=True)
    failures = 0
    for fid in frame_ids:
        try:
            scene = load_frame(args.data_root, fid)
        except (OSError, ValueError) as exc:
            log.warning("skipping frame %s: %s", fid, exc)
            failures += 1
            continue
        t0 = time.perf_counter()
        det = model.predict([scene])[0]
        dt = time.perf_counter() - t0
        calib = read_calib(os.path.join(args.data_root, "calib", fid + ".txt"))
        with open(os.path.join(out, "detections", fid + ".txt"), "w") as fh:
            lines = _result_lines(det, calib)
            fh.write("\n".join(lines) + ("\n" if lines else ""))
        if args.export_points:
            keep = det["gen_scores"] >= args.score_threshold
            write_ply(
                os.path.join(out, "points", fid + ".ply"),
                det["gen_points"][keep], det["gen_scores"][keep],
            )
        print(f"{fid}: {det['boxes'].shape[0]} detections in {dt:.3f}s")
    if failures:
        log.error("%d frames failed", failures)
        return 1
    return 0


def cmd_probe_misaligned(args) -> int:
    cfg = _config_from_checkpoint(args.checkpoint, args)
    model = _build_model(args.checkpoint, cfg)
    scene = data_mod.filter_scene_to_range(
        load_frame(args.data_root, args.frame), cfg
    )
    if scene.gt_boxes.shape[0] == 0:
        print("frame has no ground truth to distort")
        return 1
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 23]))
    boxes = scene.gt_boxes.copy()
    boxes[:, 0] += rng.uniform(-args.translation, args.translation, len(boxes))
    boxes[:, 1] += rng.uniform(-args.translation, args.translation, len(boxes))
    boxes[:, 6] = wrap_angle(
        boxes[:, 6] + rng.uniform(-args.yaw, args.yaw, len(boxes))
    )
    refined = model.refine_boxes(scene, boxes, scene.gt_classes)
    before = np.diag(iou_3d_matrix(
        np.ascontiguousarray(boxes), np.ascontiguousarray(scene.gt_boxes)
    ))
    after = np.diag(iou_3d_matrix(
        np.ascontiguousarray(refined.astype(np.float64)),
        np.ascontiguousarray(scene.gt_boxes),
    ))
    print("proposal  IoU before  IoU after")
    for i, (b, a) in enumerate(zip(before, after)):
        print(f"{i:8d}  {b:10.4f}  {a:9.4f}")
    print(f"mean      {before.mean():10.4f}  {after.mean():9.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        det = model.predict([scene])[0]
        keep = det["gen_scores"] >= cfg.export.ply_score_threshold
        write_ply(os.path.join(args.out, args.frame + "_generated.ply"),
                  det["gen_points"][keep], det["gen_scores"][keep])
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config YAML path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--data-root", default="data/synth")
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointgen3d",
        description="Two-stage LiDAR 3D detector with point generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--clutter", type=int, default=120)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("build-targets", help="build the completion-target bank")
    _add_common(p)
    p.set_defaults(fn=cmd_build_targets)

    p = sub.add_parser("train", help="train a detector")
    _add_common(p)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--print-every", type=int, default=20)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="run inference and export results")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--frames", default=None,
                   help="comma-separated frame ids (overrides --split)")
    p.add_argument("--export-points", action="store_true")
    p.add_argument("--score-threshold", type=float, default=0.6)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("probe-misaligned",
                       help="refine distorted GT boxes and report IoU change")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--translation", type=float, default=0.5)
    p.add_argument("--yaw", type=float, default=0.2)
    p.set_defaults(fn=cmd_probe_misaligned)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
