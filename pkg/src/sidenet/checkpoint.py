"""Named-tensor archive ("S4V1").

Layout, all little-endian::

    magic       4 bytes  b"S4V1"
    count       u32
    per tensor:
        name_len    u32
        name        UTF-8 bytes
        dtype       u8   (0 = f32, 1 = f64)
        rank        u8
        dims        rank x u64
        data        raw element bytes

Tensors are written in sorted-name order so equal contents give equal files.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"S4V1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, missing=(), unexpected=(), shape_mismatch=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.shape_mismatch = sorted(shape_mismatch)
        parts = []
        if self.missing:
            parts.append("missing tensors: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected tensors: " + ", ".join(self.unexpected))
        if self.shape_mismatch:
            parts.append("shape mismatch: " + "; ".join(f"{n} {a} != {b}" for n, a, b in self.shape_mismatch))
        super().__init__(" | ".join(parts))


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "data", v))


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointFormatError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(chunks)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated archive at byte {pos} (need {n} more)")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out


def save_checkpoint(tensors: Mapping[str, np.ndarray], path) -> None:
    data = encode(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())


def check_compatible(expected: Mapping[str, tuple], found: Mapping[str, np.ndarray]) -> None:
    """Raise listing every missing, unexpected, or wrongly shaped tensor name."""
    missing = set(expected) - set(found)
    unexpected = set(found) - set(expected)
    shapes = [
        (n, tuple(found[n].shape), tuple(expected[n]))
        for n in set(expected) & set(found)
        if tuple(found[n].shape) != tuple(expected[n])
    ]
    if missing or unexpected or shapes:
        raise CheckpointMismatchError(missing, unexpected, shapes)
