"""HHOI-CKPT-1 checkpoint files.

Layout::

    HHOI-CKPT-1\\n
    <manifest JSON, one line>\\n
    <blob: little-endian float64 tensors, concatenated>

The manifest repeats the magic string and lists every tensor's name, shape
and byte offset into the blob, plus free-form metadata.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "HHOI-CKPT-1"


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {"magic": MAGIC, "tensors": entries, "blob_bytes": offset, "meta": dict(meta or {})}
    head = json.dumps(manifest, separators=(",", ":"))
    return (MAGIC + "\n" + head + "\n").encode() + b"".join(chunks)


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        magic_end = raw.index(b"\n")
        head_end = raw.index(b"\n", magic_end + 1)
    except ValueError:
        raise CheckpointError("truncated checkpoint header") from None
    if raw[:magic_end].decode(errors="replace") != MAGIC:
        raise CheckpointError(f"bad magic {raw[:magic_end][:32]!r}")
    manifest = json.loads(raw[magic_end + 1 : head_end])
    if manifest.get("magic") != MAGIC:
        raise CheckpointError("manifest magic missing")
    blob = raw[head_end + 1 :]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return tensors, manifest["meta"]


def save(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
