"""Pure-Python reader and writer for embedding store files.

Layout, little-endian: b"FIGE" | u32 version=1 | u64 count | u32 dim |
u8 flags (bit0 normalized) | 3 zero bytes | count*dim float32 row-major |
count x (u16 byte length, UTF-8 id).
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FIGE"
VERSION = 1
EMPTY_TEXT_ID = "__EMPTY__"
_HEADER = struct.Struct("<4sIQIB3x")


class StoreFormatError(ValueError):
    pass


def encode_store(ids: Sequence[str], values: np.ndarray, normalized: bool = True) -> bytes:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2 or values.shape[0] != len(ids):
        raise ValueError(f"values shape {values.shape} does not match {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite values")
    if normalized and values.size and np.max(np.abs(np.linalg.norm(values.astype(np.float64), axis=1) - 1.0)) > 1e-5:
        raise ValueError("rows are not unit norm")
    out = [_HEADER.pack(MAGIC, VERSION, values.shape[0], values.shape[1], 1 if normalized else 0), values.tobytes()]
    for item in ids:
        raw = item.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"id too long: {item[:32]}...")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
    return b"".join(out)


def decode_store(data: bytes) -> tuple[list[str], np.ndarray, bool]:
    if len(data) < _HEADER.size:
        raise StoreFormatError("truncated header")
    magic, version, count, dim, flags = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise StoreFormatError("bad magic")
    if version != VERSION:
        raise StoreFormatError(f"unsupported version {version}")
    offset = _HEADER.size
    nbytes = count * dim * 4
    if len(data) < offset + nbytes:
        raise StoreFormatError("truncated values")
    values = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim).astype(np.float32)
    offset += nbytes
    ids = []
    for _ in range(count):
        if len(data) < offset + 2:
            raise StoreFormatError("truncated manifest")
        (length,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if len(data) < offset + length:
            raise StoreFormatError("truncated id")
        ids.append(data[offset : offset + length].decode("utf-8"))
        offset += length
    if offset != len(data):
        raise StoreFormatError("trailing bytes")
    return ids, values, bool(flags & 1)


def save_store(path: str | Path, ids: Sequence[str], values: np.ndarray, normalized: bool = True) -> None:
    Path(path).write_bytes(encode_store(ids, values, normalized))


def load_store(path: str | Path) -> tuple[list[str], np.ndarray, bool]:
    return decode_store(Path(path).read_bytes())
