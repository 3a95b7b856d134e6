"""Named-tensor checkpoint files.

Layout: magic ``EDKP``, little-endian u32 tensor count, then per tensor a
u16 name length, the UTF-8 name, u8 rank, u32 per-dim sizes, and the
float64 payload in row-major order.  Round trips are bit-exact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"EDKP"


def save_checkpoint(tensors: dict[str, np.ndarray], path) -> None:
    """Write tensors atomically (temp file + rename); names must be unique."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        # note: asarray, not ascontiguousarray, which would promote 0-d to 1-d
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise FormatError("tensor rank exceeds format limit")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    offset = 4

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        piece = data[offset : offset + n]
        offset += n
        return piece

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if rank else 1
        payload = take(8 * size)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return tensors
