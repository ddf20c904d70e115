"""Low-level binary tensor encoding shared by checkpoints and dataset files.

All multi-byte fields are little-endian. Tensor payload layout:
rank (u8), dims (u32 each), data (IEEE-754 single precision, row-major).
Named tensors prefix the payload with a u16 length + UTF-8 name.
Standalone tensor files carry the magic "FTT0" before the payload.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

TENSOR_FILE_MAGIC = b"FTT0"

MAX_RANK = 8


class FormatError(Exception):
    """Raised when a binary tensor or checkpoint stream is malformed."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream while reading {what} "
                          f"(wanted {n} bytes, got {len(buf)})")
    return buf


def write_tensor_payload(f: BinaryIO, array: np.ndarray) -> None:
    """Write rank, dims, and float32 data for one tensor."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim > MAX_RANK:
        raise FormatError(f"tensor rank {arr.ndim} exceeds maximum {MAX_RANK}")
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(arr.tobytes(order="C"))


def read_tensor_payload(f: BinaryIO, what: str = "tensor") -> np.ndarray:
    """Read one rank/dims/data payload as a float32 array."""
    (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {what}"))
    if rank > MAX_RANK:
        raise FormatError(f"{what}: rank {rank} exceeds maximum {MAX_RANK}")
    dims = []
    for i in range(rank):
        (d,) = struct.unpack("<I", _read_exact(f, 4, f"dim {i} of {what}"))
        dims.append(d)
    count = 1
    for d in dims:
        count *= d
    raw = _read_exact(f, 4 * count, f"data of {what}")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def write_named_tensor(f: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise FormatError(f"tensor name too long: {len(encoded)} bytes")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    write_tensor_payload(f, array)


def read_named_tensor(f: BinaryIO, what: str = "tensor") -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"name length of {what}"))
    name = _read_exact(f, name_len, f"name of {what}").decode("utf-8")
    return name, read_tensor_payload(f, f"{what} '{name}'")


def save_tensor_file(path, array: np.ndarray) -> None:
    """Write a single unnamed tensor file (magic FTT0 + payload)."""
    with open(path, "wb") as f:
        f.write(TENSOR_FILE_MAGIC)
        write_tensor_payload(f, array)


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != TENSOR_FILE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {TENSOR_FILE_MAGIC!r}")
        arr = read_tensor_payload(f, "tensor")
        if f.read(1):
            raise FormatError("trailing bytes after tensor data")
    return arr
