import time

import numpy as np
import torch

torch.set_num_threads(1)
torch.manual_seed(0)

from pointgen3d.config import desk_config
from pointgen3d.data import Scene, SynthSpec, synth_scene, build_target_bank
from pointgen3d.model import PGDetector, parameter_count
from pointgen3d.rpg import TargetBank
from pointgen3d.geometry import Box3D

cfg = desk_config(num_classes=1)
print("spatial shape", cfg.voxels.spatial_shape)

spec = SynthSpec(n_objects=2, class_mix=(1.0, 0.0, 0.0), clutter_points=100)
scenes = [synth_scene(spec, cfg, seed=s) for s in (1, 2)]
for s in scenes:
    print(s.frame_id, "points", s.points.shape, "gt", s.gt_boxes.shape)

bank = TargetBank([a.name for a in cfg.rpn.anchors])
for s in scenes:
    bank.add_scene(s.frame_id, s.points[:, :3],
                   [Box3D.from_array(b) for b in s.gt_boxes], s.gt_classes)
bank.build_targets(cfg)
print("bank records", len(bank.records), "targets", len(bank.targets))

model = PGDetector(cfg)
model.bank = bank
print("params", parameter_count(model))

t0 = time.time()
losses = model.losses(scenes)
print("forward", time.time() - t0, "s")
for k, v in losses.items():
    print(" ", k, float(v))

t0 = time.time()
losses["total"].backward()
print("backward", time.time() - t0, "s")

grads = sum(1 for p in model.parameters() if p.grad is not None and p.grad.abs().sum() > 0)
total_p = sum(1 for _ in model.parameters())
print("params with nonzero grad:", grads, "/", total_p)

model.eval()
t0 = time.time()
dets = model.predict(scenes)
print("predict", time.time() - t0, "s")
for d in dets:
    print(" boxes", d["boxes"].shape, "scores", d["scores"].shape,
          "gen", d["gen_points"].shape)
