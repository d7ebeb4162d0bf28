"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"LMOSCKPT"
    version    uint32    currently 1
    hdr_len    uint32    byte length of the JSON header
    header     hdr_len   UTF-8 JSON: {"meta": {...}, "tensors": [
                             {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload    raw little-endian arrays, C order, offsets relative to payload start
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"LMOSCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(header)) + header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_arrays(path) -> tuple:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hdr_len = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hdr_len])
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    payload = memoryview(data)[16 + hdr_len:]
    arrays = {}
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def state_arrays(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    sd = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(sd)


def digest(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
