"""Density map file format.

Layout: magic "QDM1", uint32 LE height, uint32 LE width, then height*width
float32 LE values in row-major order.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"QDM1"
_HEADER = struct.Struct("<4sII")


def write_qdm(path, density: np.ndarray):
    arr = np.ascontiguousarray(density, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("density must be 2-D")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, h, w))
        f.write(arr.tobytes())


def read_qdm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"truncated header in {path}")
        magic, h, w = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"bad magic in {path}: {magic!r}")
        payload = f.read(h * w * 4)
        if len(payload) != h * w * 4:
            raise ValueError(f"truncated payload in {path}")
        extra = f.read(1)
        if extra:
            raise ValueError(f"trailing bytes in {path}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()
