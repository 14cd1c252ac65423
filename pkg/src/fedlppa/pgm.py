"""Binary PGM (P5) reading and writing; 16-bit samples are big-endian per the format."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if not 0 < maxval < 65536:
        raise ValueError(f"bad maxval {maxval}")
    if image.min() < 0 or image.max() > maxval:
        raise ValueError("sample values outside [0, maxval]")
    dtype = ">u1" if maxval < 256 else ">u2"
    h, w = image.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1  # single whitespace after maxval
    dtype = ">u1" if maxval < 256 else ">u2"
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Store a [0, 1] float image as 16-bit PGM."""
    write_pgm(path, np.round(np.clip(image, 0.0, 1.0) * 65535).astype(np.uint16), maxval=65535)


def load_image(path) -> np.ndarray:
    return read_pgm(path).astype(np.float32) / 65535.0
