"""Depth and image file formats.

* PFM: single-channel ``Pf`` portable float map, written little-endian
  (negative scale), rows stored bottom-to-top as the format requires.
* 16-bit PNG depth: ``depth_m = png_value / 256``; 0 marks a missing pixel.
* RGB: 8-bit PNG.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

PNG16_SCALE = 256.0


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    elif data.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM needs [H,W] or [H,W,3], got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().decode("ascii")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValueError(f"malformed PFM dimensions line {dims!r}")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(), dtype=dtype)
    expected = w * h * channels
    if raw.size != expected:
        raise ValueError(f"PFM payload has {raw.size} floats, expected {expected}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(raw.reshape(shape)).astype(np.float32)


def write_png16(path: str | Path, depth: np.ndarray, valid: np.ndarray | None = None) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth) & (depth > 0)
    q = np.where(valid, np.round(np.nan_to_num(depth) * PNG16_SCALE), 0)
    if q.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit PNG range (255.996 m)")
    Image.fromarray(q.astype(np.uint16)).save(path)


def read_png16(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Return (depth in meters, valid mask)."""
    raw = np.asarray(Image.open(path), dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"expected a single-channel 16-bit PNG: {path}")
    return raw / PNG16_SCALE, raw > 0


def write_rgb(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def read_rgb(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def read_depth(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load depth from PFM or 16-bit PNG. Zero or non-finite pixels are invalid."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        d = read_pfm(path).astype(np.float64)
        return d, np.isfinite(d) & (d > 0)
    if path.suffix.lower() == ".png":
        return read_png16(path)
    raise ValueError(f"unsupported depth file type: {path.suffix}")
