"""8-bit image I/O: PNG via Pillow, PPM (P6) by hand.

Byte output is deterministic for fixed pixel data (fixed Pillow encoder
settings; PPM is written directly).
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] float image -> uint8, round half away from zero."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    """img is (H,W,3) float in [0,1] or uint8."""
    data = img if img.dtype == np.uint8 else to_uint8(img)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG", compress_level=6)
    Path(path).write_bytes(buf.getvalue())


def read_png(path) -> np.ndarray:
    """Returns (H,W,3) float in [0,1]."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_ppm(path, img: np.ndarray) -> None:
    data = img if img.dtype == np.uint8 else to_uint8(img)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError("not a P6 PPM file")
    parts = raw.split(b"\n", 3)
    w, h = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return from_uint8(data)
