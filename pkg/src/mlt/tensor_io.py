"""Binary tensor serialization.

Record layout: magic bytes ``MLT1``, u32 little-endian rank, rank u32
little-endian extents, then row-major float64 little-endian payload.
Used by datasets, checkpoints and prediction dumps.
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import BinaryIO

import numpy as np

MAGIC = b"MLT1"


class CorruptTensorError(IOError):
    """Raised on bad magic, truncated payload or malformed header."""


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(arr.astype("<f8", copy=False).tobytes())  # tobytes is C-order


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise CorruptTensorError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = fh.read(4)
    if len(head) != 4:
        raise CorruptTensorError("truncated rank field")
    (rank,) = struct.unpack("<I", head)
    extents = []
    for _ in range(rank):
        raw = fh.read(4)
        if len(raw) != 4:
            raise CorruptTensorError("truncated extent field")
        extents.append(struct.unpack("<I", raw)[0])
    count = int(np.prod(extents)) if extents else 1
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise CorruptTensorError(
            f"truncated payload: wanted {count * 8} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(extents)


def record_size(array: np.ndarray) -> int:
    """Byte length of one serialized record."""
    return 4 + 4 + 4 * array.ndim + 8 * array.size


def save_tensor(path: str, array: np.ndarray) -> None:
    """Atomic write: temp file in the target directory then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write_tensor(fh, array)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise CorruptTensorError(f"{path}: trailing bytes after payload")
    return arr
