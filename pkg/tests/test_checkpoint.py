"""Checkpoint archive: exact round trips and mismatch detection."""

import numpy as np
import pytest
import torch

from pointgen3d.checkpoint import (load_checkpoint, read_checkpoint,
                                   save_checkpoint)
from pointgen3d.config import Config, desk_config
from pointgen3d.model import PGDetector


def _model(seed=0, **overrides):
    torch.manual_seed(seed)
    cfg = desk_config()
    for key, val in overrides.items():
        section, name = key.split(".")
        setattr(getattr(cfg, section), name, val)
    return PGDetector(cfg), cfg


def test_round_trip_exact(tmp_path):
    model, cfg = _model(seed=3)
    # age the BN statistics so buffers differ from init
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm1d):
            m.running_mean.add_(0.25)
            m.num_batches_tracked.fill_(7)
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, cfg, meta={"step": 42})
    fresh, _ = _model(seed=99)
    meta = load_checkpoint(path, fresh)
    assert meta == {"step": 42}
    want = model.state_dict()
    got = fresh.state_dict()
    assert set(want) == set(got)
    for name in want:
        assert got[name].dtype == want[name].dtype
        np.testing.assert_array_equal(got[name].numpy(), want[name].numpy())


def test_config_snapshot_survives(tmp_path):
    model, cfg = _model()
    cfg.train.lr = 0.00375
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, cfg)
    _, cfg_yaml, meta = read_checkpoint(path)
    assert Config.from_yaml(cfg_yaml) == cfg
    assert meta == {}


def test_not_an_archive(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"PNG\x00 definitely not weights")
    model, _ = _model()
    with pytest.raises(ValueError, match="not a checkpoint archive"):
        load_checkpoint(str(path), model)


def test_key_mismatch_rejected(tmp_path):
    model, cfg = _model()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, cfg)
    other, _ = _model(**{"head.branch_depth": 3})
    with pytest.raises(ValueError, match="state mismatch"):
        load_checkpoint(path, other)


def test_shape_mismatch_rejected(tmp_path):
    model, cfg = _model()
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, model, cfg)
    other, _ = _model(**{"head.branch_hidden": 48})
    with pytest.raises(ValueError, match="has shape"):
        load_checkpoint(path, other)
