"""Checkpoint files.

Layout: 8-byte magic ``CDYF0001``, an unsigned 64-bit little-endian manifest
length, the UTF-8 JSON manifest, then raw little-endian tensor payloads in
manifest directory order. The manifest holds the model config, free-form
metadata (step, seed, optimizer hyperparameters) and a tensor directory of
``{name, shape, dtype, offset, nbytes}`` with offsets relative to the payload
start.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"CDYF0001"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: Dict
    tensors: "OrderedDict[str, np.ndarray]"
    meta: Dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _dtype_tag(arr: np.ndarray) -> str:
    tag = arr.dtype.newbyteorder("<").str
    if tag not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return tag


def to_bytes(ckpt: Checkpoint) -> bytes:
    directory, payloads, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(tag)).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": tag,
                          "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = {"format_version": ckpt.version, "config": ckpt.config, "meta": ckpt.meta,
                "tensors": directory}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(blob)) + blob + b"".join(payloads)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {MAGIC!r}, got {data[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise CheckpointError(f"truncated manifest length at offset {pos}")
    (mlen,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + mlen:
        raise CheckpointError(f"truncated manifest at offset {pos}: need {mlen} bytes, have {len(data) - pos}")
    try:
        manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest at offset {pos}: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    base = pos + mlen
    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(
                f"truncated payload for tensor {entry['name']!r} at offset {start}: need {entry['nbytes']} bytes, "
                f"have {max(len(data) - start, 0)}")
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"unknown dtype {entry['dtype']!r} for tensor {entry['name']!r}")
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype)
    return Checkpoint(manifest["config"], tensors, manifest.get("meta", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
