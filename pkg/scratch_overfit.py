import json
import sys
import time

import numpy as np
import torch

torch.set_num_threads(1)

from pointgen3d.config import desk_config
from pointgen3d.data import SynthSpec, synth_scene
from pointgen3d.geometry import Box3D
from pointgen3d.rpg import TargetBank
from pointgen3d.training import Trainer

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 600
variant = sys.argv[3] if len(sys.argv) > 3 else "full"

cfg = desk_config(num_classes=1)
cfg.seed = seed
cfg.deterministic = True
cfg.train.epochs = 10000
cfg.train.lr = 0.003
if variant == "score_only":
    cfg.rpg.use_offset_path = False
elif variant == "offset_only":
    cfg.rpg.use_score_path = False

spec = SynthSpec(n_objects=2, class_mix=(1.0, 0.0, 0.0), clutter_points=100,
                 surface_density=30.0)
scenes = [synth_scene(spec, cfg, seed=1000 + i) for i in range(20)]
bank = TargetBank([a.name for a in cfg.rpn.anchors])
for s in scenes:
    bank.add_scene(s.frame_id, s.points[:, :3],
                   [Box3D.from_array(b) for b in s.gt_boxes], s.gt_classes)
bank.build_targets(cfg)

trainer = Trainer(cfg, scenes, bank, max_steps=steps)
t0 = time.time()
first_offset = None
while trainer.step < trainer.total_steps:
    for batch in trainer._batches(trainer.step // trainer.steps_per_epoch):
        if trainer.step >= trainer.total_steps:
            break
        rec = trainer.train_step(batch)
        if first_offset is None:
            first_offset = rec["offset"]
        if rec["step"] % 50 == 0:
            ap = trainer.evaluate(scenes)["car"] if rec["step"] % 150 == 0 else None
            print(f"step {rec['step']:4d} total={rec['total']:.3f} "
                  f"off={rec['offset']:.4f} score={rec['score']:.4f} "
                  f"rpnc={rec['rpn_cls']:.3f} rpnr={rec['rpn_reg']:.3f} "
                  f"hc={rec['head_conf']:.3f} hr={rec['head_reg']:.4f}"
                  + (f" AP={ap:.4f}" if ap is not None else ""), flush=True)

elapsed = time.time() - t0
ap = trainer.evaluate(scenes)["car"]
tail = [h["offset"] for h in trainer.history[-20:]]
print(json.dumps({
    "variant": variant, "seed": seed, "steps": trainer.step,
    "minutes": elapsed / 60, "ap": ap,
    "offset_first": first_offset, "offset_tail_mean": float(np.mean(tail)),
}), flush=True)
