"""Parameter checkpoints: text header followed by raw little-endian float64 data.

    PCNCKPT 1
    meta <key> <json value>
    tensor <name> <d0>x<d1>x...      ("scalar" for 0-d)
    end
    <concatenated tensor bytes, in header order>
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = "PCNCKPT 1"


def _arr(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)


def save_checkpoint(path, tensors: Mapping[str, object], meta: Mapping[str, object] | None = None) -> Path:
    lines = [MAGIC]
    for k, v in sorted((meta or {}).items()):
        if any(ch.isspace() for ch in k):
            raise ValueError(f"meta key {k!r} contains whitespace")
        lines.append(f"meta {k} {json.dumps(v, sort_keys=True, separators=(',', ':'))}")
    blobs = []
    for name, value in tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        a = _arr(value)
        dims = "x".join(str(d) for d in a.shape) if a.ndim else "scalar"
        lines.append(f"tensor {name} {dims}")
        blobs.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    lines.append("end")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, object]]:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise FormatError(f"{path}: not a checkpoint file")
    header = raw[: end].decode().split("\n")[1:]
    offset = end + len(b"\nend\n")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, object] = {}
    for line in header:
        kind, _, rest = line.partition(" ")
        name, _, val = rest.partition(" ")
        if kind == "meta":
            meta[name] = json.loads(val)
        elif kind == "tensor":
            shape = () if val == "scalar" else tuple(int(d) for d in val.split("x"))
            n = int(np.prod(shape, dtype=np.int64))
            chunk = raw[offset : offset + 8 * n]
            if len(chunk) != 8 * n:
                raise FormatError(f"{path}: truncated data for tensor {name}")
            tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            offset += 8 * n
        else:
            raise FormatError(f"{path}: bad header line {line!r}")
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return tensors, meta
