"""Versioned binary checkpoint format shared by generator and discriminator.

Layout: magic "PCU4D01", little-endian u32 tensor count, then per tensor a
u32 name length, the utf-8 name, u32 rank, u32 dims, and the float32 data
in C order. Tensors round-trip bit-exactly at float32 precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCU4D01"


def save_checkpoint(path, tensors: dict) -> None:
    """Write named float arrays; values are stored as float32."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(value, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict:
    """Read a checkpoint back as {name: float64 array} (values are float32)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a PCU4D01 checkpoint")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f4", count=n_items, offset=off)
        off += n_items * 4
        tensors[name] = data.reshape(shape).astype(np.float64)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return tensors
