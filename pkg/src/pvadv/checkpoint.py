"""Binary tensor container shared by every artifact on disk.

Layout::

    b"PVCKPT1\\0"
    uint64 little-endian header length
    UTF-8 JSON header {"tensors": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    raw little-endian payloads, offsets relative to the end of the header
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PVCKPT1\0"


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))


def dumps(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in tensors:
        arr = _le(np.asarray(tensors[name]))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not a PVCKPT1 container")
    if len(blob) < 16:
        raise CheckpointError("truncated header length")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise CheckpointError("truncated header")
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"truncated payload for tensor {e['name']!r}")
        dt = np.dtype(e["dtype"])
        arr = np.frombuffer(blob[start:end], dtype=dt).reshape(e["shape"])
        out[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return out, header.get("meta", {})


def save(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return loads(p.read_bytes())
