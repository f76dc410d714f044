"""Diagnose the overfit benchmark: where does AP go missing?"""
import json
import sys
import time

import numpy as np
import torch

from pointgen3d.config import desk_config
from pointgen3d.data import SynthSpec, synth_scene
from pointgen3d.geometry import Box3D, wrap_angle
from pointgen3d.rpg import TargetBank
from pointgen3d.kernels import iou_3d_matrix
from pointgen3d.metrics import detections_to_frames, evaluate_detections
from pointgen3d.model import _flatten_proposals
from pointgen3d.training import Trainer, seed_everything

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600

cfg = desk_config(num_classes=1)
cfg.seed = seed
cfg.deterministic = True
cfg.train.epochs = 10000

spec = SynthSpec(n_objects=2, class_mix=(1.0, 0.0, 0.0), clutter_points=100,
                 surface_density=30.0)
scenes = [synth_scene(spec, cfg, seed=1000 + i) for i in range(20)]
bank = TargetBank([a.name for a in cfg.rpn.anchors])
for s in scenes:
    bank.add_scene(s.frame_id, s.points[:, :3],
                   [Box3D.from_array(b) for b in s.gt_boxes], s.gt_classes)
bank.build_targets(cfg)

seed_everything(cfg.seed, cfg.deterministic)
trainer = Trainer(cfg, scenes, bank, max_steps=steps)
t0 = time.time()
eval_cfg_thr = {"car": 0.5}
while trainer.step < trainer.total_steps:
    nxt = min(trainer.step + 500, trainer.total_steps)
    while trainer.step < nxt:
        epoch = trainer.step // trainer.steps_per_epoch
        for batch in trainer._batches(epoch):
            if trainer.step >= nxt:
                break
            rec = trainer.train_step(batch)
            if trainer.step % 100 == 1:
                print(f"step {trainer.step - 1:5d} " + " ".join(
                    f"{k}={rec[k]:.4f}" for k in
                    ("rpn_cls", "rpn_reg", "head_conf", "head_reg", "score",
                     "offset")), flush=True)
    saved = dict(cfg.eval.iou_thresholds)
    cfg.eval.iou_thresholds = eval_cfg_thr
    res = trainer.evaluate(scenes)
    cfg.eval.iou_thresholds = saved
    print(f"== step {trainer.step}: AP@0.5 = {res['car']:.4f} "
          f"({(time.time() - t0) / 60:.1f} min)", flush=True)
mins = (time.time() - t0) / 60.0
print(f"trained {trainer.step} steps in {mins:.2f} min")

hist = trainer.history
off0 = hist[0]["offset"]
off_tail = float(np.mean([h["offset"] for h in hist[-20:]]))
print(f"offset first={off0:.4f} tail={off_tail:.4f} ratio={off0 / off_tail:.1f}x")

model = trainer.model
model.eval()

# 1. AP at both thresholds on the standard predict path.
for thr in (0.7, 0.5):
    cfg.eval.iou_thresholds = {"car": thr}
    res = trainer.evaluate(scenes)
    print(f"AP@{thr} refined+conf: {res['car']:.4f}")

# 2. Bypass variants: proposals as detections, and refined boxes with
#    proposal scores, to separate reg damage from conf damage.
frames_prop, frames_mix = [], []
with torch.no_grad():
    for i in range(0, len(scenes), 4):
        chunk = scenes[i:i + 4]
        out = model.forward(chunk, training=False)
        from pointgen3d.rpn import decode_boxes, wrap_angle_t
        refined = decode_boxes(out["head"]["reg"], out["boxes"])
        refined = torch.cat(
            [refined[:, :6], wrap_angle_t(refined[:, 6]).unsqueeze(1)], dim=1
        ).numpy().astype(np.float64)
        props = out["boxes"].numpy().astype(np.float64)
        pscores = out["proposal_scores"].numpy().astype(np.float64)
        conf = torch.sigmoid(out["head"]["conf"]).numpy().astype(np.float64)
        labels = out["labels"].numpy()
        bidx = out["batch_idx"].numpy()
        for b, scene in enumerate(chunk):
            rows = np.nonzero(bidx == b)[0]
            det_p = {"boxes": props[rows], "scores": pscores[rows],
                     "labels": labels[rows]}
            det_m = {"boxes": refined[rows], "scores": pscores[rows],
                     "labels": labels[rows]}
            frames_prop.extend(detections_to_frames([scene], [det_p]))
            frames_mix.extend(detections_to_frames([scene], [det_m]))

for name, fr in (("proposals+rpn_score", frames_prop),
                 ("refined+rpn_score", frames_mix)):
    res = evaluate_detections(fr, ["car"], {"car": 0.5}, 40)
    print(f"AP@0.5 {name}: {res['car']:.4f}")

# 3. Inspect one scene in detail.
scene = scenes[0]
with torch.no_grad():
    out = model.forward([scene], training=False)
    from pointgen3d.rpn import decode_boxes, wrap_angle_t
    refined = decode_boxes(out["head"]["reg"], out["boxes"])
    refined = torch.cat(
        [refined[:, :6], wrap_angle_t(refined[:, 6]).unsqueeze(1)], dim=1
    ).numpy().astype(np.float64)
props = out["boxes"].numpy().astype(np.float64)
conf = torch.sigmoid(out["head"]["conf"]).numpy()
iou_p = iou_3d_matrix(np.ascontiguousarray(props), scene.gt_boxes)
iou_r = iou_3d_matrix(np.ascontiguousarray(refined), scene.gt_boxes)
print("scene0 gt:")
print(np.round(scene.gt_boxes, 2))
order = np.argsort(-conf)
print("rank | conf | prop_iou | refined_iou | prop box -> refined box")
for r in order[:8]:
    print(f"{r:3d} | {conf[r]:.3f} | {iou_p[r].max():.3f} | {iou_r[r].max():.3f} | "
          f"{np.round(props[r], 2)} -> {np.round(refined[r], 2)}")
print(f"conf spread: min={conf.min():.3f} max={conf.max():.3f} std={conf.std():.4f}")
corr = np.corrcoef(conf, iou_p.max(axis=1))[0, 1]
print(f"conf-vs-iou corr (scene0): {corr:.3f}")

# 4. Criterion-8 style probe: distort GT, refine, compare IoU.
rng = np.random.default_rng(7)
before, after = [], []
for scene in scenes:
    gt = scene.gt_boxes
    d = gt.copy()
    d[:, 0] += rng.uniform(-0.5, 0.5, gt.shape[0])
    d[:, 1] += rng.uniform(-0.5, 0.5, gt.shape[0])
    d[:, 6] = wrap_angle(d[:, 6] + rng.uniform(-0.2, 0.2, gt.shape[0]))
    ref = model.refine_boxes(scene, d, np.zeros(gt.shape[0], dtype=np.int64))
    before.extend(np.diag(iou_3d_matrix(np.ascontiguousarray(d), gt)))
    after.extend(np.diag(iou_3d_matrix(np.ascontiguousarray(ref), gt)))
print(f"probe mean IoU before={np.mean(before):.4f} after={np.mean(after):.4f}")

print(json.dumps({"seed": seed, "steps": steps, "minutes": mins,
                  "offset_ratio": off0 / off_tail}))
