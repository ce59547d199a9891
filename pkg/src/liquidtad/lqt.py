"""LQT1 binary array format.

Layout: magic ``b"LQT1"``, little-endian u32 rank, rank x u32 dims, then
prod(dims) little-endian float32 values in row-major order.
"""
import struct

import numpy as np

MAGIC = b"LQT1"


class CorruptFileError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf, offset=0):
    """Decode one record starting at ``offset``; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise CorruptFileError("bad magic bytes, not an LQT1 record")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise CorruptFileError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + 4 * rank:
        raise CorruptFileError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * n
    if len(buf) < end:
        raise CorruptFileError(f"truncated data: expected {4 * n} bytes, got {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
    return arr, end


def save(path, arr):
    with open(path, "wb") as f:
        f.write(encode(arr))


def load(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = decode(buf)
    if end != len(buf):
        raise CorruptFileError(f"{len(buf) - end} trailing bytes after record")
    return arr


def read_shape(path):
    with open(path, "rb") as f:
        head = f.read(8)
        if head[:4] != MAGIC or len(head) < 8:
            raise CorruptFileError(f"{path}: bad LQT1 header")
        (rank,) = struct.unpack("<I", head[4:])
        dims = f.read(4 * rank)
        if len(dims) < 4 * rank:
            raise CorruptFileError(f"{path}: truncated header")
        return struct.unpack(f"<{rank}I", dims)
