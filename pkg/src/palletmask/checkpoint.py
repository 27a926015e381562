"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"PLMCKPT\\0"
    u32       format version
    u32       metadata length in bytes
    ...       metadata, UTF-8 JSON (kind, architecture, pallet, tensor table)
    u64       number of float64 parameters
    ...       parameters, little-endian float64, tensors concatenated in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PLMCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    table = [[name, list(np.shape(arr))] for name, arr in tensors.items()]
    header = dict(meta)
    header["kind"] = kind
    header["tensors"] = table
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate(
        [np.asarray(a, dtype="<f8").ravel() for a in tensors.values()] or [np.zeros(0, "<f8")]
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", payload.size))
        fh.write(payload.astype("<f8").tobytes())


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) - off != 8 * count:
        raise CheckpointError(f"{path}: truncated or oversized payload")
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=off)
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
    tensors = {}
    pos = 0
    for name, shape in meta["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = flat[pos : pos + n].reshape(shape).astype(np.float64)
        pos += n
    if pos != count:
        raise CheckpointError(f"{path}: payload size {count} does not match tensor table ({pos})")
    return meta, tensors
