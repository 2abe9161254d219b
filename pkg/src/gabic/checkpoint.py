"""Checkpoint container.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"GCKP"
    4       4     u32 format version (1)
    8       8     model config hash
    16      4     u32 metadata length L
    20      L     UTF-8 JSON: {"config": {...}, "meta": {...}}
    20+L    4     u32 tensor count
    then per tensor:
            2     u16 name length, followed by the UTF-8 name
            1     u8 dtype code (1 = float32, 2 = float64, 3 = int64)
            1     u8 rank R
            4*R   u32 extents
            ...   raw little-endian values, row-major
    end     4     u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from typing import Any

import numpy as np

from .network import GabicModel, ModelConfig

MAGIC = b"GCKP"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    pass


def serialize(config: ModelConfig, tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    out = bytearray(MAGIC + struct.pack("<I", VERSION) + config.hash())
    out += struct.pack("<I", len(header)) + header
    out += struct.pack("<I", len(tensors))
    for name, value in tensors.items():
        value = np.asarray(value)
        code = _CODES.get(value.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {value.dtype}")
        encoded = name.encode()
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<BB", code, value.ndim)
        out += struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def deserialize(data: bytes) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < 24 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = data[8:16]
    (length,) = struct.unpack_from("<I", data, 16)
    header = json.loads(data[20:20 + length].decode())
    config = ModelConfig.from_dict(header["config"])
    if config.hash() != stored_hash:
        raise CheckpointError("config hash does not match the stored configuration")
    pos = 20 + length
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        code, rank = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(data[pos:pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    return config, tensors, header["meta"]


def save(path: str | os.PathLike, model: GabicModel, meta: dict[str, Any] | None = None,
         extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update(extra or {})
    with open(path, "wb") as fh:
        fh.write(serialize(model.config, tensors, meta))


def load(path: str | os.PathLike, dtype=None) -> tuple[GabicModel, dict[str, Any], dict[str, np.ndarray]]:
    """Return (model, metadata, non-parameter tensors such as optimizer state)."""
    with open(path, "rb") as fh:
        config, tensors, meta = deserialize(fh.read())
    model = GabicModel(config)
    if dtype is not None:
        model.cast(dtype)
    model.load_state_dict(tensors)
    extra = {k: v for k, v in tensors.items() if k not in model.params}
    return model, meta, extra
