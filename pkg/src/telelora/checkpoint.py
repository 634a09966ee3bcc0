"""Flat binary tensor container: magic, JSON manifest, little-endian float32 payload.

Layout::

    b"TLRA1" | u64 LE manifest length | manifest JSON (utf-8) | payload

The manifest lists every tensor (name, dtype, shape, offset, nbytes) plus a
free-form ``meta`` object (config echo, seeds).  JSON is written with sorted
keys so identical content always gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"TLRA1"
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}; only float32 is stored")
        raw = arr.astype("<f4", copy=False).tobytes(order="C")
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = canonical_json({"tensors": entries, "meta": dict(meta or {})}).encode("utf-8")
    return MAGIC + _LEN.pack(len(manifest)) + manifest + b"".join(blobs)


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not data.startswith(MAGIC):
        raise CheckpointError("bad magic: not a TLRA1 checkpoint")
    head = len(MAGIC) + _LEN.size
    if len(data) < head:
        raise CheckpointError("truncated header")
    (mlen,) = _LEN.unpack_from(data, len(MAGIC))
    try:
        manifest = json.loads(data[head : head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    payload = memoryview(data)[head + mlen :]
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {e['dtype']!r}")
        lo, n = e["offset"], e["nbytes"]
        if lo + n > len(payload) or n != 4 * int(np.prod(e["shape"], dtype=np.int64)):
            raise CheckpointError(f"tensor {e['name']!r} out of bounds")
        arr = np.frombuffer(payload[lo : lo + n], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    return tensors, manifest["meta"]


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> str:
    """Write atomically; returns the sha256 of the file contents."""
    data = dumps(tensors, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        return loads(f.read())


def file_hash(path: str | os.PathLike) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
