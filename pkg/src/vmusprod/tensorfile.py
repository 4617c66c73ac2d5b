"""VMFT tensor files.

Layout (little-endian): magic ``VMFT``, version u16, dtype code u8, ndim
u8, ndim x u32 dims, then the raw payload in C order.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"VMFT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_CODES = {v: k for k, v in DTYPES.items()}


class TensorFormatError(ValueError):
    pass


def dumps(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f" and dt.itemsize == 4:
        code = 1
    elif dt.kind == "f" and dt.itemsize == 8:
        code = 2
    elif dt == np.uint8:
        code = 3
    elif dt.kind in "iub":
        code = 4
    else:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=DTYPES[code])
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    head = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def read_from(buf: io.BufferedIOBase) -> np.ndarray:
    head = buf.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise TensorFormatError("not a VMFT tensor")
    version, code, ndim = struct.unpack("<HBB", head[4:])
    if version != VERSION:
        raise TensorFormatError(f"unsupported VMFT version {version}")
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dims_raw = buf.read(4 * ndim)
    if len(dims_raw) < 4 * ndim:
        raise TensorFormatError("truncated VMFT header")
    dims = struct.unpack(f"<{ndim}I", dims_raw)
    dtype = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = buf.read(nbytes)
    if len(payload) != nbytes:
        raise TensorFormatError(f"truncated VMFT payload: expected {nbytes} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def loads(blob: bytes) -> np.ndarray:
    return read_from(io.BytesIO(blob))


def save(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(dumps(array))


def load(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_from(f)
