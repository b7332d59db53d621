"""8-bit RGB image I/O. PNG for reading and writing; P6 PPM accepted as an
additional input format."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_image(path):
    """Load PNG (or PPM) as float32 (3, h, w) in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def quantize(arr):
    """Clamp to [0, 1] and quantize to u8, rounding half up."""
    clamped = np.clip(arr, 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def write_image(path, arr):
    """Write a float (3, h, w) array in [0, 1] as 8-bit RGB PNG."""
    arr = np.asarray(arr)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) image, got {arr.shape}")
    q = quantize(arr).transpose(1, 2, 0)
    Image.fromarray(q, mode="RGB").save(Path(path), format="PNG")
