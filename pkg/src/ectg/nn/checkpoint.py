"""Model checkpoint container: a JSON header describing named tensors
followed by their raw little-endian payloads.  Round-trips are bit-exact."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"ECTGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    seed: int
    version: int


def save_checkpoint(path, tensors: dict[str, Tensor | np.ndarray], config: dict, seed: int) -> None:
    names = sorted(tensors)
    arrays = {}
    for name in names:
        t = tensors[name]
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        arrays[name] = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
    header = {
        "version": FORMAT_VERSION,
        "dtype": {name: str(arrays[name].dtype) for name in names},
        "seed": seed,
        "config": config,
        "tensors": [{"name": name, "shape": list(arrays[name].shape)} for name in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(arrays[name].tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an ECTG checkpoint file")
    offset = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    try:
        header = json.loads(raw[offset : offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    offset += hlen
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        dtype = np.dtype(header["dtype"][name])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint payload at tensor {name!r}")
        tensors[name] = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    return Checkpoint(tensors=tensors, config=header.get("config", {}), seed=header.get("seed", 0), version=header["version"])


def load_into(params: dict[str, Tensor], ckpt: Checkpoint) -> None:
    """Copy checkpoint arrays into an existing parameter tree, by name."""
    missing = sorted(set(params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter name mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        arr = ckpt.tensors[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
