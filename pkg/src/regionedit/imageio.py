"""Binary PPM (P6) and PBM (P4) reading and writing.

Images are float arrays in [0, 1] of shape (H, W, 3); they are stored as
8-bit samples, so values that are multiples of 1/255 round-trip exactly.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_HEADER = re.compile(rb"\A(P[46])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s")
_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(pixels: np.ndarray) -> bytes:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"PPM needs (H, W, 3) pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + to_bytes(pixels).tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(blob)
    if not m:
        raise FormatError("not a binary PPM (P6)")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError("only 8-bit PPM is supported")
    body = blob[m.end():]
    if len(body) != w * h * 3:
        raise FormatError(f"PPM body has {len(body)} bytes, expected {w * h * 3}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_pbm(mask: np.ndarray) -> bytes:
    """Raw PBM; a set mask pixel is stored as 1 (black)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise FormatError("PBM needs a 2-D mask")
    h, w = mask.shape
    return b"P4\n%d %d\n" % (w, h) + np.packbits(mask, axis=1).tobytes()


def decode_pbm(blob: bytes) -> np.ndarray:
    m = _HEADER.match(blob)
    if not m or m.group(1) != b"P4":
        raise FormatError("not a raw PBM (P4)")
    w, h = int(m.group(2)), int(m.group(3))
    row = (w + 7) // 8
    body = blob[m.end():]
    if len(body) != row * h:
        raise FormatError(f"PBM body has {len(body)} bytes, expected {row * h}")
    bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8).reshape(h, row), axis=1)
    return bits[:, :w].astype(bool)


def write_pbm(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pbm(mask))


def read_pbm(path) -> np.ndarray:
    return decode_pbm(Path(path).read_bytes())


def mask_overlay(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Red tint at 50% over the masked pixels."""
    out = np.array(pixels, dtype=np.float64, copy=True)
    red = np.array([1.0, 0.0, 0.0])
    m = np.asarray(mask, dtype=bool)
    out[m] = 0.5 * out[m] + 0.5 * red
    return out
