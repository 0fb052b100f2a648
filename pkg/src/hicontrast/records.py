"""Versioned binary container of named float64 arrays plus a JSON metadata blob.

Layout (little-endian)::

    magic "HCRC" | version u32 | meta_len u32 | meta (utf-8 JSON) | count u32
    count x [name_len u16 | name | ndim u8 | shape u32*ndim | data f64*prod(shape)]
    trailer "END!"
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

MAGIC = b"HCRC"
VERSION = 1
TRAILER = b"END!"


class RecordError(ValueError):
    pass


def dumps_records(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(TRAILER)
    return b"".join(parts)


def loads_records(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a container; any truncation or version mismatch raises ``RecordError``."""
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise RecordError("record file truncated")
        chunk = buf[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise RecordError("bad magic, not a record file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise RecordError(f"unsupported record version {version} (expected {VERSION})")
    try:
        meta = json.loads(take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RecordError(f"corrupt metadata: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if take(4) != TRAILER or off != len(buf):
        raise RecordError("record file corrupt (bad trailer)")
    return arrays, meta


def save_records(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_records(arrays, meta))


def load_records(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads_records(fh.read())
