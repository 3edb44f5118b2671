"""Named-tensor container.

Layout::

    VQPLAN-CKPT 1
    meta <key> <json value>          (zero or more)
    tensor <name> <d0,d1,...> <offset>
    ...
    END
    <little-endian float64 payload>

Offsets count float64 elements from the start of the payload.  Scalars use
an empty shape field ``-``.
"""
from __future__ import annotations

import json
import os

import numpy as np

MAGIC = "VQPLAN-CKPT 1"


class CheckpointError(ValueError):
    pass


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    lines = [MAGIC]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"meta {k} {json.dumps(v, sort_keys=True)}")
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name may not contain whitespace: {name!r}")
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset}")
        chunks.append(arr.reshape(-1))
        offset += arr.size
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    payload = np.concatenate(chunks).astype("<f8").tobytes() if chunks else b""
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[:end].decode("ascii").split("\n")
    payload = np.frombuffer(raw[end + 5:], dtype="<f8")
    tensors, meta = {}, {}
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, val = rest.split(" ", 1)
            meta[key] = json.loads(val)
        elif kind == "tensor":
            name, shape, off = rest.split(" ")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            off = int(off)
            size = int(np.prod(dims)) if dims else 1
            if off + size > payload.size:
                raise CheckpointError(f"{path}: tensor {name} overruns payload")
            tensors[name] = payload[off:off + size].reshape(dims).astype(np.float64)
        else:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
    return tensors, meta
