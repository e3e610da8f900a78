"""Checkpoint persistence and averaging.

File layout (all integers little-endian):

    magic   4 bytes  b"DLCK"
    version u32      currently 1
    cfg_len u32      followed by cfg_len bytes of ModelConfig JSON (UTF-8)
    n_tensors u32
    then per tensor, in sorted-name order:
        name_len u32, name bytes (UTF-8)
        ndim u32, dims u32 each
        data: float32 little-endian, C order

Tensors live in float64 in memory; the file stores float32.  Loading a file
and saving it again reproduces the bytes exactly, and every float32 value
survives the float64 round trip unchanged.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .model import ModelConfig, Params

_MAGIC = b"DLCK"
_VERSION = 1


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version, or truncated/corrupt tensor data."""


def save_checkpoint(path: str | Path, params: Params) -> None:
    cfg_bytes = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    parts: List[bytes] = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        struct.pack("<I", len(cfg_bytes)),
        cfg_bytes,
        struct.pack("<I", len(params.tensors)),
    ]
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Params:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint {path}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != _MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(bytes(take(cfg_len)).decode("utf-8")))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    if pos != len(view):
        raise CheckpointFormatError(f"{path} has {len(view) - pos} trailing bytes")
    return Params(config, tensors)


def average_checkpoints(checkpoints: Sequence[Params]) -> Params:
    """Elementwise arithmetic mean of the given parameter sets."""
    if not checkpoints:
        raise ValueError("nothing to average")
    first = checkpoints[0]
    keys = set(first.tensors)
    for other in checkpoints[1:]:
        if set(other.tensors) != keys:
            raise ValueError("checkpoints have different tensor sets")
        for k in keys:
            if other.tensors[k].shape != first.tensors[k].shape:
                raise ValueError(f"shape mismatch on {k}")
    avg = {
        k: np.mean([c.tensors[k] for c in checkpoints], axis=0) for k in sorted(keys)
    }
    return Params(first.config, avg)
