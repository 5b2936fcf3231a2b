"""Binary checkpoint container: config JSON header + named tensor payload.

Byte-deterministic for identical inputs (sorted-key JSON, fixed tensor order),
so stage outputs can be content-addressed and cached by hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CFRC"
VERSION = 1
_PREFIX = struct.Struct("<4sBBBBQ")

_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(ValueError):
    """Raised when a checkpoint file fails to parse."""


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.dtype == np.float64:
        return arr.astype("<f8")
    return arr.astype("<f4")


def save_checkpoint(path, kind: str, config: dict, tensors: dict) -> None:
    path = Path(path)
    arrays = {name: _as_array(t) for name, t in tensors.items()}
    meta, offset = [], 0
    for name, arr in arrays.items():
        code = "f8" if arr.dtype == np.dtype("<f8") else "f4"
        nbytes = arr.size * arr.itemsize
        meta.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    header = json.dumps(
        {"kind": kind, "config": config, "tensors": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, 0, 0, 0, len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated prefix")
    magic, version, _, _, _, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(raw) < _PREFIX.size + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + header_len].decode("utf-8"))
    body = raw[_PREFIX.size + header_len:]
    tensors = {}
    for meta in header["tensors"]:
        start, nbytes = meta["offset"], meta["nbytes"]
        if start + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated payload for {meta['name']}")
        arr = np.frombuffer(body[start:start + nbytes], dtype=_DTYPES[meta["dtype"]])
        tensors[meta["name"]] = arr.reshape(meta["shape"]).copy()
    return Checkpoint(kind=header["kind"], config=header["config"], tensors=tensors)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config fragment."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
