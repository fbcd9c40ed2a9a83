"""Binary tensor checkpoints shared by the LM and the SAE.

Layout (all integers little-endian)::

    magic        4 bytes   b"PLLM" (language model) or b"PLSA" (autoencoder)
    version      uint32
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (config, seed, extras)
    n_tensors    uint32
    per tensor, in the order the writer received them:
        name_len uint16, name (UTF-8)
        ndim     uint8,  dims uint32 * ndim
        data     float32 little-endian, C order

Float32 is the storage type; writing then reading is bit-exact for any
array whose values are representable in float32.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
LM_MAGIC = b"PLLM"
SAE_MAGIC = b"PLSA"


def dumps(magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        as32 = arr.astype("<f4")
        if not np.array_equal(as32.astype(arr.dtype), arr, equal_nan=True):
            raise CheckpointError(f"tensor {name!r} is not representable in float32")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(as32).tobytes())
    return b"".join(parts)


def loads(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        if data[:4] != magic:
            raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            tensors[name] = arr.astype(np.float32)
        if off != len(data):
            raise CheckpointError("trailing bytes after last tensor")
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return header, tensors


def write(path, magic: bytes, header: Mapping, tensors: Mapping[str, np.ndarray]) -> str:
    """Write a checkpoint and return the sha256 of its bytes."""
    blob = dumps(magic, header, tensors)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, magic)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
