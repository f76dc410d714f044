"""Training loop: Adam + one-cycle schedule, per-step component logging,
non-finite loss detection, periodic checkpoints, and deterministic mode.
"""

from __future__ import annotations

import json
import math
import os
import random

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .metrics import detections_to_frames, evaluate_detections
from .model import PGDetector, parameter_count

LOSS_KEYS = ("rpn_cls", "rpn_reg", "head_conf", "head_reg", "score", "offset",
             "total")


def seed_everything(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(deterministic)


def build_optimizer(model: torch.nn.Module, cfg, total_steps: int):
    if cfg.train.optimizer != "adam_onecycle":
        raise ValueError(f"unknown optimizer {cfg.train.optimizer!r}")
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.train.lr,
        weight_decay=cfg.train.weight_decay,
    )
    total = max(total_steps, 1)
    pct = cfg.train.onecycle_pct_start
    if pct * total < 2.0:
        # keep the warmup phase a nonzero number of steps on tiny runs
        pct = min(0.9, 2.0 / total)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=cfg.train.lr, total_steps=total, pct_start=pct
    )
    return opt, sched


class Trainer:
    """Drives PGDetector over an in-memory list of scenes."""

    def __init__(self, cfg, scenes: list, bank, out_dir: str = None,
                 max_steps: int = None):
        self.cfg = cfg
        self.scenes = scenes
        self.out_dir = out_dir
        seed_everything(cfg.seed, cfg.deterministic)
        self.model = PGDetector(cfg)
        self.model.bank = bank
        steps_per_epoch = max(
            1, math.ceil(len(scenes) / cfg.train.batch_size)
        )
        self.total_steps = steps_per_epoch * cfg.train.epochs
        if max_steps is not None:
            self.total_steps = min(self.total_steps, max_steps)
        self.steps_per_epoch = steps_per_epoch
        self.optimizer, self.scheduler = build_optimizer(
            self.model, cfg, self.total_steps
        )
        self.history = []
        self.step = 0
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self._log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w")
        else:
            self._log_fh = None

    def _batches(self, epoch: int):
        order = np.random.default_rng(
            np.random.SeedSequence([int(self.cfg.seed), int(epoch), 17])
        ).permutation(len(self.scenes))
        bs = self.cfg.train.batch_size
        for i in range(0, len(order), bs):
            yield [self.scenes[j] for j in order[i:i + bs]]

    def train_step(self, batch: list) -> dict:
        self.model.train()
        losses = self.model.losses(batch)
        for key in LOSS_KEYS:
            if not torch.isfinite(losses[key]):
                raise RuntimeError(
                    f"non-finite loss component {key!r} at step {self.step}"
                )
        self.optimizer.zero_grad()
        losses["total"].backward()
        if self.cfg.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                self.model.parameters(), self.cfg.train.grad_clip
            )
        self.optimizer.step()
        self.scheduler.step()
        record = {k: float(losses[k].detach()) for k in LOSS_KEYS}
        record["step"] = self.step
        record["lr"] = self.optimizer.param_groups[0]["lr"]
        self.history.append(record)
        if self._log_fh and self.step % self.cfg.train.log_every == 0:
            self._log_fh.write(json.dumps(record) + "\n")
            self._log_fh.flush()
        self.step += 1
        return record

    def fit(self, print_every: int = 0) -> list:
        epoch = 0
        while self.step < self.total_steps:
            for batch in self._batches(epoch):
                if self.step >= self.total_steps:
                    break
                rec = self.train_step(batch)
                if print_every and rec["step"] % print_every == 0:
                    comps = " ".join(
                        f"{k}={rec[k]:.4f}" for k in LOSS_KEYS
                    )
                    print(f"step {rec['step']:5d} {comps}")
            epoch += 1
            if (self.out_dir and self.cfg.train.checkpoint_every > 0
                    and epoch % self.cfg.train.checkpoint_every == 0):
                self.save(os.path.join(self.out_dir, f"epoch_{epoch:04d}.ckpt"))
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final.ckpt"))
        if self._log_fh:
            self._log_fh.close()
            self._log_fh = None
        return self.history

    def save(self, path: str) -> None:
        save_checkpoint(
            path, self.model, self.cfg,
            {"step": self.step, "params": parameter_count(self.model)},
        )

    @torch.no_grad()
    def evaluate(self, scenes: list, batch_size: int = 0) -> dict:
        return evaluate_model(self.model, self.cfg, scenes, batch_size)


@torch.no_grad()
def evaluate_model(model: PGDetector, cfg, scenes: list,
                   batch_size: int = 0) -> dict:
    model.eval()
    bs = batch_size or cfg.train.batch_size
    frames = []
    for i in range(0, len(scenes), bs):
        chunk = scenes[i:i + bs]
        dets = model.predict(chunk)
        frames.extend(detections_to_frames(chunk, dets))
    class_names = [a.name for a in cfg.rpn.anchors]
    return evaluate_detections(
        frames, class_names, cfg.eval.iou_thresholds,
        cfg.eval.recall_positions,
    )
