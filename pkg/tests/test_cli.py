"""End-to-end CLI pipeline on a miniature synthetic dataset."""

import os
import re

import numpy as np
import pytest

from pointgen3d.cli import main
from pointgen3d.config import desk_config


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    root = str(base / "data")
    run = str(base / "run")
    common = ["--data-root", root, "--seed", "0", "--deterministic"]
    assert main(["synth-data", *common, "--frames", "4", "--objects", "1",
                 "--clutter", "40"]) == 0
    assert main(["build-targets", *common]) == 0
    assert main(["train", *common, "--max-steps", "4", "--out", run,
                 "--print-every", "0"]) == 0
    return base, root, run


def test_synth_data_layout(pipeline):
    _, root, _ = pipeline
    for sub in ("velodyne", "label_2", "calib", "ImageSets"):
        assert os.path.isdir(os.path.join(root, sub))
    with open(os.path.join(root, "ImageSets", "train.txt")) as fh:
        train_ids = fh.read().split()
    with open(os.path.join(root, "ImageSets", "val.txt")) as fh:
        val_ids = fh.read().split()
    assert len(train_ids) == 4 and len(val_ids) == 1
    assert not set(train_ids) & set(val_ids)


def test_build_targets_writes_bank(pipeline):
    _, root, _ = pipeline
    bank_dir = os.path.join(root, "target_bank")
    assert os.path.isfile(os.path.join(bank_dir, "index.txt"))
    assert os.path.isdir(os.path.join(bank_dir, "instances"))


def test_train_writes_checkpoint(pipeline):
    _, _, run = pipeline
    assert os.path.isfile(os.path.join(run, "final.ckpt"))
    assert os.path.isfile(os.path.join(run, "train_log.jsonl"))


def test_eval_prints_ap(pipeline, capsys):
    _, root, run = pipeline
    ckpt = os.path.join(run, "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data-root", root,
                 "--split", "val"]) == 0
    out = capsys.readouterr().out
    assert re.search(r"AP_R40 car: \d\.\d{4}", out)
    # synthetic difficulty is 0 everywhere, so stratified lines appear too
    assert "AP_R40 car_d0:" in out


def test_infer_exports_detections_and_points(pipeline, capsys):
    base, root, run = pipeline
    ckpt = os.path.join(run, "final.ckpt")
    out_dir = str(base / "inference")
    assert main(["infer", "--checkpoint", ckpt, "--data-root", root,
                 "--split", "val", "--out", out_dir, "--export-points",
                 "--score-threshold", "0.0"]) == 0
    with open(os.path.join(root, "ImageSets", "val.txt")) as fh:
        fid = fh.read().split()[0]
    det_path = os.path.join(out_dir, "detections", fid + ".txt")
    assert os.path.isfile(det_path)
    with open(det_path) as fh:
        for line in fh.read().strip().splitlines():
            fields = line.split()
            assert len(fields) == 16
            assert fields[0] == "Car"
    ply_path = os.path.join(out_dir, "points", fid + ".ply")
    with open(ply_path) as fh:
        ply = fh.read().splitlines()
    n_vertex = int(next(l for l in ply if l.startswith("element vertex"))
                   .split()[-1])
    n_rows = len(ply) - ply.index("end_header") - 1
    assert n_vertex == n_rows
    g3 = desk_config().roi.grid_size ** 3
    assert n_vertex > 0 and n_vertex % g3 == 0


def test_infer_reports_missing_frame(pipeline):
    base, root, run = pipeline
    ckpt = os.path.join(run, "final.ckpt")
    assert main(["infer", "--checkpoint", ckpt, "--data-root", root,
                 "--frames", "999999", "--out", str(base / "inf2")]) == 1


def test_probe_zero_distortion_is_identity(pipeline, capsys):
    _, root, run = pipeline
    ckpt = os.path.join(run, "final.ckpt")
    with open(os.path.join(root, "ImageSets", "train.txt")) as fh:
        fid = fh.read().split()[0]
    assert main(["probe-misaligned", "--checkpoint", ckpt, "--data-root",
                 root, "--frame", fid, "--translation", "0.0",
                 "--yaw", "0.0"]) == 0
    out = capsys.readouterr().out
    rows = [l for l in out.splitlines() if re.match(r"\s*\d+\s", l)]
    assert len(rows) == 1  # one object per frame in this dataset
    before = float(rows[0].split()[1])
    assert before == pytest.approx(1.0, abs=1e-6)
    assert "mean" in out


def test_eval_checkpoint_carries_config(pipeline, capsys):
    # eval without --config must reuse the training config snapshot
    _, root, run = pipeline
    ckpt = os.path.join(run, "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data-root", root,
                 "--split", "train"]) == 0
    out = capsys.readouterr().out
    assert "AP_R40 car:" in out


def test_missing_command_exits():
    with pytest.raises(SystemExit):
        main([])
