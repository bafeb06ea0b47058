"""Binary PPM (P6) / PGM (P5) and PNG image I/O.

Quantization is linear: ``round(255 * clamp(v, 0, 1))``; no sRGB curve.
"""

from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def quantize(img) -> np.ndarray:
    arr = np.asarray(img.detach().cpu() if hasattr(img, "detach") else img, dtype=np.float64)
    return np.round(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)


def _write(path, magic: bytes, data: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(data).tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    return path


def write_ppm(path, img) -> Path:
    """``img`` is ``(H, W, 3)`` floats in [0, 1] or uint8."""
    data = img if getattr(img, "dtype", None) == np.uint8 else quantize(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {data.shape}")
    return _write(path, b"P6", data)


def write_pgm(path, img) -> Path:
    data = img if getattr(img, "dtype", None) == np.uint8 else quantize(img)
    if data.ndim != 2:
        raise ValueError(f"PGM needs (H, W), got {data.shape}")
    return _write(path, b"P5", data)


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 as uint8 ``(H, W)`` or ``(H, W, 3)``."""
    blob = Path(path).read_bytes()
    m = _HEADER.match(blob)
    if not m:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * channels, offset=m.end())
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_image(path) -> np.ndarray:
    """Float image in [0, 1] from PPM/PGM/PNG."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        data = np.asarray(Image.open(path))
    else:
        data = read_pnm(path)
    return data.astype(np.float64) / 255.0


def write_png(path, img) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = img if getattr(img, "dtype", None) == np.uint8 else quantize(img)
    Image.fromarray(data).save(path)
    return path


def write_image(path, img) -> Path:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return write_png(path, img)
    if suffix == ".pgm":
        return write_pgm(path, img)
    return write_ppm(path, img)
