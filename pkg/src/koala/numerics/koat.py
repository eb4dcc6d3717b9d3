"""KOAT tensor container.

Record layout: 4-byte magic ``KOAT``, u32 version (=1), u32 rank,
rank x u64 dims, then row-major little-endian float32 values. A file may
hold several records back to back.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import RejectedInput

MAGIC = b"KOAT"
VERSION = 1


def encode(array):
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_from(buf, offset=0):
    """Decode one record starting at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise RejectedInput(f"bad KOAT magic at byte {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != VERSION:
        raise RejectedInput(f"unsupported KOAT version {version}")
    pos = offset + 12
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    end = pos + 4 * count
    if end > len(buf):
        raise RejectedInput("truncated KOAT record")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
    return arr, end


def decode(buf):
    arr, end = decode_from(buf, 0)
    if end != len(buf):
        raise RejectedInput("trailing bytes after KOAT record")
    return arr


def save(path, arrays):
    """Write one array, or a sequence of arrays as consecutive records."""
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    with open(path, "wb") as fh:
        for a in arrays:
            fh.write(encode(a))


def load_all(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode_from(buf, pos)
        out.append(arr)
    return out


def load(path):
    arrays = load_all(path)
    if len(arrays) != 1:
        raise RejectedInput(f"{path}: expected one KOAT record, found {len(arrays)}")
    return arrays[0]
