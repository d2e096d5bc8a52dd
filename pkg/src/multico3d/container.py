"""Binary tensor container.

Layout (little-endian): magic ``MC3D``, version u8, dtype u8 (0=f32, 1=f64,
2=u8), ndim u8, one pad byte, ndim x u64 extents, row-major payload.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"MC3D"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}
MAX_ELEMENTS = 1 << 40


class FormatError(IOError):
    pass


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
    code = CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("too many dimensions")
    fh.write(MAGIC + struct.pack("<BBBx", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(DTYPES[code], copy=False).tobytes(order="C"))


def read_tensor(fh: BinaryIO, name: str = "<stream>") -> np.ndarray:
    head = fh.read(8)
    if len(head) < 8:
        raise FormatError(f"{name}: truncated header")
    if head[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {head[:4]!r}")
    version, code, ndim = struct.unpack("<BBBx", head[4:])
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if code not in DTYPES:
        raise FormatError(f"{name}: unknown dtype code {code}")
    raw = fh.read(8 * ndim)
    if len(raw) < 8 * ndim:
        raise FormatError(f"{name}: truncated extents")
    shape = struct.unpack(f"<{ndim}Q", raw)
    count = 1
    for s in shape:
        count *= s
        if count > MAX_ELEMENTS:
            raise FormatError(f"{name}: dimension overflow {shape}")
    dt = DTYPES[code]
    payload = fh.read(count * dt.itemsize)
    if len(payload) < count * dt.itemsize:
        raise FormatError(f"{name}: truncated payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        arr = read_tensor(fh, str(path))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return arr
