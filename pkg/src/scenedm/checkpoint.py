"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SDMCKPT\\0"            8 bytes magic
    u32 format version
    u32 header length
    header                  UTF-8 JSON: {"tensors": [{name, shape, dtype, offset, nbytes}], "meta": {...}}
    payload                 raw little-endian float arrays, concatenated in header order
    sha256                  32-byte digest of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SDMCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "f4": np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in params.items():
        arr = np.asarray(getattr(arr, "data", arr))
        code = "f4" if arr.dtype == np.float32 else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(MAGIC) + 8 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(body[start : start + hlen])
    payload = memoryview(body)[start + hlen :]
    params = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        params[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return params, header["meta"]


def save(path: str | Path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint and return its sha256 hex digest."""
    blob = dumps(params, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
