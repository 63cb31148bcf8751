"""PDCK checkpoint files: a flat dictionary of named float32 arrays.

Layout (little-endian): b"PDCK", u32 version, then until EOF one record per
array: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .data import FormatError

MAGIC = b"PDCK"
VERSION = 1


def dumps(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or a.ndim > 0xFF:
            raise ValueError(f"cannot serialise {name!r}")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad_magic", "bad magic")
    if len(blob) < 8:
        raise FormatError("truncated", "truncated payload")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError("bad_version", f"unsupported version {version}")
    pos, out = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated", "truncated payload")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
    return out


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]):
    Path(path).write_bytes(dumps(arrays))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
