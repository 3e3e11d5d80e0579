"""Weight checkpoint file: "GP3W", u32 version, u64 manifest length, JSON manifest, f64 LE blobs."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GP3W"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays in insertion order; `meta` must be JSON-serializable."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise CheckpointError(f"{path}: manifest length {mlen} exceeds file size at offset 8")
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    base = 16 + mlen
    arrays = {}
    for e in manifest["entries"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: truncated entry {e['name']!r} at offset {start}")
        count = e["nbytes"] // 8
        arrays[e["name"]] = np.frombuffer(raw, "<f8", count, start).reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]
