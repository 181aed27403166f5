"""Self-describing checkpoint container with deterministic bytes.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
(version, kind, metadata, array manifest), then raw little-endian array bytes
concatenated in header order. Arrays are written in sorted name order and the
JSON uses sorted keys, so identical contents produce identical files; that is
what lets the determinism checks byte-compare training artifacts.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CTXASRCK"
CONTAINER_VERSION = 1


def write_container(path: Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    manifest = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"version": CONTAINER_VERSION, "kind": kind, "meta": meta, "arrays": manifest},
        sort_keys=True, ensure_ascii=False).encode("utf-8")
    with path.open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path: Path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"not a checkpoint container: {path}")
    (header_len,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("version") != CONTAINER_VERSION:
        raise CheckpointError(f"unsupported checkpoint version: {header.get('version')}")
    kind = header.get("kind", "")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"expected {expected_kind!r} checkpoint, found {kind!r}: {path}")
    arrays: dict[str, np.ndarray] = {}
    offset = 16 + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        blob = data[offset:offset + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(f"truncated checkpoint payload: {path}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    return kind, header.get("meta", {}), arrays
