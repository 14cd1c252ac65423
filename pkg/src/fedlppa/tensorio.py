"""FLT1 tensor files: b"FLT1", u32 ndim, ndim x u32 dims, little-endian f32 payload."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLT1"


def dumps(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def loads(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not an FLT1 tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != 4 * count:
        raise ValueError(f"FLT1 payload holds {len(blob) - offset} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
