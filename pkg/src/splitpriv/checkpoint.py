"""Binary tensor container shared by model checkpoints and corpus caches.

Layout::

    b"SPCK" | u64 LE header length | JSON header (utf-8) | payload

The header carries free-form metadata plus a tensor directory
``[{"name", "shape", "offset"}]``; offsets are relative to the payload start
and every tensor is stored as raw little-endian float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPCK"
_LEN = struct.Struct("<Q")


class ContainerError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": directory}, sort_keys=True).encode()
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def loads(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise ContainerError("not a tensor container (bad magic)")
    (hlen,) = _LEN.unpack_from(buf, 4)
    start = 12 + hlen
    if len(buf) < start:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(buf[12:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt container header: {exc}") from None
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + entry["offset"]
        hi = lo + 4 * count
        if hi > len(buf):
            raise ContainerError(f"tensor {entry['name']!r} runs past end of container")
        tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4", count=count, offset=lo).reshape(shape).astype(np.float32)
    return tensors, header["meta"]


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
