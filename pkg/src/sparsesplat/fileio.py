"""PNG (8-bit) and PFM (float32) image files, plus small JSON helpers."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image


class ImageFormatError(ValueError):
    pass


def save_png(image, path) -> None:
    """Write a float image in [0, 1] as 8-bit PNG (gray for 2-D arrays)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_pfm(array, path) -> None:
    """Little-endian float32 PFM; rows stored bottom-up as the format requires."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        tag = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = b"PF"
    else:
        raise ImageFormatError(f"PFM needs HxW or HxWx3, got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ImageFormatError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ImageFormatError(f"{path}: malformed PFM size line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise ImageFormatError(f"{path}: expected {w * h * channels} floats, found {data.size}")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def mask_to_png(mask, path) -> None:
    """Three-level confidence mask {0, 0.5, 1} -> gray {0, 128, 255}."""
    m = np.asarray(mask)
    out = np.zeros(m.shape, dtype=np.uint8)
    out[m == 0.5] = 128
    out[m == 1.0] = 255
    Image.fromarray(out).save(path, format="PNG")


def mask_from_png(path) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    out = np.zeros(raw.shape, dtype=np.float64)
    out[raw == 128] = 0.5
    out[raw == 255] = 1.0
    bad = ~np.isin(raw, (0, 128, 255))
    if bad.any():
        raise ImageFormatError(f"{path}: mask contains values outside {{0, 128, 255}}")
    return out


def write_json(path, payload, indent: int = 2) -> None:
    """Atomic JSON write (temp file + rename)."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        json.dump(payload, f, indent=indent, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def read_json(path):
    return json.loads(Path(path).read_text())
