"""Single-file checkpoint archive.

Layout: magic, format version, a UTF-8 YAML snapshot of the config, a small
JSON metadata block, then named tensor records (name, shape, float32
little-endian payload). Dtypes are restored from the live model's state dict
on load, so integer buffers such as BatchNorm step counters round-trip.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np
import torch

MAGIC = b"PG3DCKPT"
VERSION = 1


def save_checkpoint(path: str, model: torch.nn.Module, cfg, meta: dict = None):
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_bytes = cfg.to_yaml().encode("utf-8")
    buf.write(struct.pack("<Q", len(cfg_bytes)))
    buf.write(cfg_bytes)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: str):
    """Returns (arrays: name -> float32 ndarray, config_yaml: str, meta: dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n_cfg,) = struct.unpack("<Q", buf.read(8))
    cfg_yaml = buf.read(n_cfg).decode("utf-8")
    (n_meta,) = struct.unpack("<Q", buf.read(8))
    meta = json.loads(buf.read(n_meta).decode("utf-8"))
    (count,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", buf.read(2))
        name = buf.read(n_name).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(
            struct.unpack("<Q", buf.read(8))[0] for _ in range(ndim)
        )
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(4 * n_items), dtype="<f4").reshape(shape)
        arrays[name] = arr
    return arrays, cfg_yaml, meta


def load_checkpoint(path: str, model: torch.nn.Module) -> dict:
    """Load weights into a built model; dtypes come from the model's own
    state dict. Returns the metadata block."""
    arrays, _, meta = read_checkpoint(path)
    template = model.state_dict()
    missing = set(template) - set(arrays)
    extra = set(arrays) - set(template)
    if missing or extra:
        raise ValueError(
            f"{path}: state mismatch, missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    state = {}
    for name, ref in template.items():
        arr = arrays[name]
        if tuple(ref.shape) != tuple(arr.shape):
            raise ValueError(
                f"{path}: {name} has shape {arr.shape}, expected "
                f"{tuple(ref.shape)}"
            )
        state[name] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    model.load_state_dict(state)
    return meta
