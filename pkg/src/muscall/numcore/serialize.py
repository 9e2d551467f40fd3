"""Flat-array tensor serialization.

Layout of one record::

    u8   dtype code (4 = float32, 8 = float64)
    u32  ndim
    u64  extent  (ndim times)
    ...  little-endian IEEE-754 payload, C order
"""

from __future__ import annotations

import io
import struct

import numpy as np

_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def header_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in _CODES:
        raise FormatError(f"cannot serialize dtype {arr.dtype}")
    return struct.pack("<BI", arr.dtype.itemsize, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    head = header_bytes(arr)
    return head + np.ascontiguousarray(arr, dtype=_CODES[arr.dtype.itemsize]).tobytes()


def read_array(stream: io.BufferedIOBase) -> np.ndarray:
    head = stream.read(5)
    if len(head) != 5:
        raise FormatError("truncated tensor header")
    code, ndim = struct.unpack("<BI", head)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    raw = stream.read(8 * ndim)
    if len(raw) != 8 * ndim:
        raise FormatError("truncated tensor shape")
    shape = struct.unpack(f"<{ndim}Q", raw)
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"truncated tensor payload: expected {nbytes} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def from_bytes(buf: bytes) -> np.ndarray:
    return read_array(io.BytesIO(buf))


def save_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(arr))


def load_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)
