"""Binary PGM (P5) and PPM (P6) image IO.

Images travel through the toolkit as float64 arrays in [0, 1], shaped
(H, W) for grayscale or (H, W, 3) for RGB.  Files are 8-bit; writing rounds
half away from zero, so the 8-bit boundary is the only lossy step.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError


def write_image(image: np.ndarray, path) -> None:
    """Write a [0,1] float image as binary PGM (2-d input) or PPM (H,W,3)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"expected (H,W) or (H,W,3) image, got {arr.shape}")
    h, w = arr.shape[:2]
    quantized = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(quantized.tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PGM/PPM into a float64 array in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    fields, offset = [], 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        if offset < len(data) and data[offset : offset + 1] == b"#":
            while offset < len(data) and data[offset : offset + 1] != b"\n":
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset : offset + 1].isspace():
            offset += 1
        if start == offset:
            raise FormatError(f"{path}: truncated header")
        fields.append(data[start:offset])
    offset += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    expected = w * h * channels
    payload = data[offset : offset + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated pixel payload")
    arr = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, 3)
