"""Shared binary envelope: 4-byte magic, length-prefixed canonical JSON header, raw payload.

All pack formats in this project (corpus files, model checkpoints, rig
candidates) use the same layout so that two files with equal logical content
are byte-identical.
"""
from __future__ import annotations

import json
import struct
from typing import Any

import numpy as np


class PackFormatError(ValueError):
    """A pack file is malformed or violates a content invariant."""


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def write_envelope(path: str, magic: bytes, header: Any, payload: bytes) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    header_bytes = canonical_json(header)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)


def read_envelope(path: str, magic: bytes) -> tuple[Any, bytes, int]:
    """Returns (header, payload, payload_offset); payload_offset is the absolute
    byte position of the first payload byte, for error reporting."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != magic:
        raise PackFormatError(f"{path}: bad magic, expected {magic!r}")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if 8 + header_len > len(raw):
        raise PackFormatError(f"{path}: truncated header (declared {header_len} bytes)")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PackFormatError(f"{path}: malformed JSON header: {exc}") from exc
    return header, raw[8 + header_len :], 8 + header_len


def floats_to_bytes(arr: np.ndarray, dtype: str = "<f4") -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def floats_from_bytes(buf: bytes, offset: int, count: int, dtype: str = "<f4") -> tuple[np.ndarray, int]:
    """Reads `count` scalars of `dtype` starting at `offset`; returns (array, next_offset)."""
    itemsize = np.dtype(dtype).itemsize
    end = offset + count * itemsize
    if end > len(buf):
        raise PackFormatError(f"payload truncated: need {end} bytes, have {len(buf)}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy(), end
