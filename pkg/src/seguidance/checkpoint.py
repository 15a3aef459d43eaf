"""Single-file checkpoints: JSON header + flat little-endian float32 parameters.

Layout::

    b"SEGCKPT1" | uint32 LE header length | UTF-8 JSON header | float32 LE data

The header records the architecture description, its hash, and the name and
shape of every tensor in storage order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SEGCKPT1"


class CheckpointError(ValueError):
    pass


def architecture_hash(arch: dict, params: list[dict]) -> str:
    blob = json.dumps({"arch": arch, "params": params}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: str | Path, arch: dict, state: dict[str, torch.Tensor], extra: dict | None = None) -> Path:
    params = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "format": 1,
        "arch": arch,
        "arch_hash": architecture_hash(arch, params),
        "params": params,
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode()
    flat = [v.detach().cpu().reshape(-1).numpy().astype("<f4") for v in state.values()]
    data = np.concatenate(flat) if flat else np.zeros(0, "<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(data.tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    params = header["params"]
    if architecture_hash(header["arch"], params) != header["arch_hash"]:
        raise CheckpointError(f"{path}: architecture hash mismatch")
    data = np.frombuffer(raw[12 + n:], dtype="<f4")
    expected = sum(int(np.prod(p["shape"])) for p in params)
    if data.size != expected:
        raise CheckpointError(f"{path}: expected {expected} floats, found {data.size}")
    state, offset = {}, 0
    for p in params:
        size = int(np.prod(p["shape"]))
        state[p["name"]] = torch.from_numpy(data[offset:offset + size].astype(np.float32).reshape(p["shape"]))
        offset += size
    return header["arch"], state, header["extra"]
