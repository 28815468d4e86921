"""Checkpoint container shared by the hybrid model and the character LM.

Layout (all integers little-endian)::

    b"HASRCKPT"  u32 version  u32 header_len  header  tensor-bytes

``header`` is canonical JSON (sorted keys, no whitespace) holding ``kind``,
``arch``, ``vocab``, ``meta`` and the ordered ``tensors`` list of
``{"name", "shape"}``. Tensor bytes follow in that order as float64 LE.
Writing the same contents twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HASRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arch: dict
    vocab: list[str]
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    header = {
        "kind": ckpt.kind,
        "arch": ckpt.arch,
        "vocab": list(ckpt.vocab),
        "meta": ckpt.meta,
        "tensors": [{"name": n, "shape": list(np.shape(ckpt.params[n]))} for n in names],
    }
    head = _canonical(header)
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head]
    for n in names:
        parts.append(np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> Checkpoint:
    if data[:8] != MAGIC or len(data) < 16:
        raise CheckpointError("not a checkpoint file")
    version, head_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    off = 16 + head_len
    params: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(data):
            raise CheckpointError(f"truncated tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes")
    return Checkpoint(header["kind"], header["arch"], header["vocab"], params, header["meta"])


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
