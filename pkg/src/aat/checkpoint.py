"""Flat binary tensor dumps: a JSON header with shapes and offsets, then raw little-endian bytes."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, DependencyError

MAGIC = b"AATCKPT1"


def save_tensors(path, tensors: dict, manifest: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"manifest": manifest or {}, "tensors": entries}).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(header)) + header)
        for raw in blobs:
            fh.write(raw)
    return path


def load_tensors(path) -> tuple[dict, dict]:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing checkpoint: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a tensor checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    body = memoryview(data)[16 + n:]
    out = {}
    for e in header["tensors"]:
        arr = np.frombuffer(body[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out, header["manifest"]


def save_module(path, module: torch.nn.Module, manifest: dict | None = None) -> Path:
    return save_tensors(path, module.state_dict(), manifest)


def load_module(path, build) -> tuple[torch.nn.Module, dict]:
    """``build(manifest)`` constructs the module before its weights are loaded."""
    state, manifest = load_tensors(path)
    module = build(manifest)
    module.load_state_dict(state)
    return module, manifest


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
