"""DTB1 tensor blobs.

Layout: magic ``DTB1``, one byte dtype code, one byte rank, ``rank``
little-endian u32 extents, then the row-major little-endian payload.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DTB1"
# 0 is the only code the format requires; 1 carries integer quantization codes.
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}
_CODE_OF = {np.dtype("<f4"): 0, np.dtype("<i4"): 1}


class DTBError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i4", copy=False)
    else:
        raise DTBError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise DTBError("rank too large")
    head = MAGIC + bytes([_CODE_OF[arr.dtype], arr.ndim])
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise DTBError("not a DTB1 blob (bad magic)")
    code, rank = blob[4], blob[5]
    if code not in DTYPE_CODES:
        raise DTBError(f"unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    end = 6 + 4 * rank
    if len(blob) < end:
        raise DTBError("truncated header")
    shape = struct.unpack(f"<{rank}I", blob[6:end])
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) != end + count * dt.itemsize:
        raise DTBError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(blob, dtype=dt, count=count, offset=end).reshape(shape).copy()


def save(path: str | os.PathLike, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
