"""Writer/reader for the ".vcre" store format.

Independent implementation of the documented byte layout (little-endian):
magic "VCRE", u32 version=1, u32 dim, u64 row_count, then row-major f32
rows.  The sidecar manifest shares the basename with a ".json" suffix and
is written canonically (sorted keys, no whitespace).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"VCRE"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def manifest_path(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + ".json"


def write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def write_store(path: str, rows: np.ndarray, manifest: dict) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ValueError("rows must be a 2-D matrix")
    header = _HEADER.pack(MAGIC, VERSION, rows.shape[1], rows.shape[0])
    write_atomic(path, header + rows.tobytes())
    write_atomic(manifest_path(path), canonical_json(manifest))


def read_store(path: str) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, dim, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError(f"{path} is not a version-{VERSION} VCRE store")
    rows = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim).copy()
    with open(manifest_path(path), "rb") as f:
        manifest = json.load(f)
    return rows, manifest
