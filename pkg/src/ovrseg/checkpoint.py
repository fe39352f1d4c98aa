"""Checkpoint serialization: named tensors + config snapshot + iteration.

The format is a flat binary file: magic, a canonical JSON header (sorted
keys, tensors listed in name order), then raw little-endian buffers in that
order. Canonical ordering makes load-then-save byte-stable, which the tests
assert.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"OVSCKPT1"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or mismatched checkpoint files."""


def write_atomic(path: str, data: bytes) -> None:
    """Write bytes to path via a temp file so readers never see partial files."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def serialize_checkpoint(state: Mapping[str, torch.Tensor], config: dict[str, Any],
                         iteration: int) -> bytes:
    entries = []
    buffers = []
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        dtype = _DTYPES[t.dtype]
        buf = t.numpy().astype(np.dtype(dtype), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape),
                        "nbytes": len(buf)})
        buffers.append(buf)
    header = json.dumps(
        {"config": config, "iteration": int(iteration), "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    return b"".join([MAGIC, struct.pack("<Q", len(header)), header, *buffers])


def deserialize_checkpoint(data: bytes) -> tuple[dict[str, torch.Tensor], dict[str, Any], int]:
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    if start + hlen > len(data):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    offset = start + hlen
    state: dict[str, torch.Tensor] = {}
    for entry in header["tensors"]:
        dtype = entry["dtype"]
        if dtype not in _TORCH_DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype!r} in checkpoint")
        nbytes = entry["nbytes"]
        if offset + nbytes > len(data):
            raise CheckpointError(f"truncated buffer for tensor {entry['name']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype=np.dtype(dtype), count=count, offset=offset)
        arr = arr.reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[dtype])
        offset += nbytes
    if offset != len(data):
        raise CheckpointError("trailing bytes after last tensor buffer")
    return state, header["config"], int(header["iteration"])


def save_checkpoint(path: str, state: Mapping[str, torch.Tensor], config: dict[str, Any],
                    iteration: int) -> None:
    write_atomic(path, serialize_checkpoint(state, config, iteration))


def load_checkpoint(path: str) -> tuple[dict[str, torch.Tensor], dict[str, Any], int]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path!r}: {e}") from e
    return deserialize_checkpoint(data)
