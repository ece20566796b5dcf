"""Checkpoint files.

Layout (all integers little-endian)::

    magic     8 bytes   b"SIRCKPT" + version byte (b"1": float64 payloads)
    count     u32       number of tensor entries
    entry *   name_len u32, name (utf-8), rank u8, extents u32 * rank,
              payload float64 * prod(extents), row-major
    meta_len  u32
    meta      utf-8 JSON: {"config": ..., "seed": ..., "iteration": ..., "rng_state": ...}

Entries are named ``teacher.*``, ``student.*``, ``adam.m.*``, ``adam.v.*``
and ``adam.t``.  A file holding only ``teacher.*`` entries is a valid
external-backbone checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .nn import SirModel
from .optim import Adam

MAGIC_PREFIX = b"SIRCKPT"
VERSION = b"1"
MAGIC = MAGIC_PREFIX + VERSION


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def encode_checkpoint(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    doc = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(doc)) + doc)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    head = buf[:8]
    if len(head) < 8 or not head.startswith(MAGIC_PREFIX):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {head!r})")
    if head[7:8] != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {head[7:8]!r}, expected {VERSION!r}")
    r = _Reader(buf, path)
    r.pos = 8
    count = r.u32("entry count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"name length of entry {i}")
        name = r.take(name_len, f"name of entry {i}").decode("utf-8")
        rank = r.take(1, f"rank of {name}")[0]
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        payload = r.take(8 * n, f"payload of {name}")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate entry {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    meta_len = r.u32("metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after metadata")
    return Checkpoint(tensors, meta)


def save_checkpoint(path, model: SirModel, optimizer: Adam | None, meta: dict) -> None:
    tensors = {name: t.data for name, t in model.named_parameters().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    data = encode_checkpoint(tensors, meta)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_checkpoint(buf, os.fspath(path))


def apply_checkpoint(ckpt: Checkpoint, model: SirModel, optimizer: Adam | None = None) -> list[str]:
    """Copy matching entries into ``model`` (and ``optimizer``); return the names loaded.

    Every model parameter present in the file must match its configured
    shape.  Missing student or optimizer entries leave the fresh values in
    place, which is how a teacher-only file is used.  The loop count is not
    stored as a tensor, so any ``loops`` setting accepts any checkpoint.
    """
    params = model.named_parameters()
    unknown = [n for n in ckpt.tensors if not n.startswith("adam.") and n not in params]
    if unknown:
        raise CheckpointError(f"checkpoint has entries the model does not: {unknown}")
    bad = [
        f"{n}: file {ckpt.tensors[n].shape} vs model {p.shape}"
        for n, p in params.items()
        if n in ckpt.tensors and ckpt.tensors[n].shape != p.shape
    ]
    if bad:
        raise CheckpointError("shape mismatch: " + "; ".join(bad))
    loaded = []
    for n, p in params.items():
        if n in ckpt.tensors:
            p.assign(ckpt.tensors[n])
            loaded.append(n)
    if optimizer is not None and "adam.t" in ckpt.tensors:
        try:
            optimizer.load_state_arrays(ckpt.tensors)
        except KeyError as e:
            raise CheckpointError(f"incomplete optimizer state: missing {e.args[0]}") from e
        except ValueError as e:
            raise CheckpointError(str(e)) from e
        loaded.append("adam")
    return loaded
