"""Minimal binary PGM (P5) / PPM (P6) reader and writer, 8-bit only."""
from __future__ import annotations

import os
import re

import numpy as np

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


class PnmError(ValueError):
    pass


def decode_pnm(buf: bytes) -> np.ndarray:
    """Return ``(C, H, W)`` uint8 with C = 1 for P5 and 3 for P6."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise PnmError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval < 1 or maxval > 255:
        raise PnmError(f"only 8-bit PNM supported, maxval={maxval}")
    pos += 1  # single whitespace byte after maxval
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    raw = buf[pos : pos + need]
    if len(raw) < need:
        raise PnmError(f"truncated PNM payload: need {need} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[None]
    c, h, w = pixels.shape
    if c not in (1, 3):
        raise PnmError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.ascontiguousarray(pixels.astype(np.uint8).transpose(1, 2, 0)).tobytes()


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pnm(f.read())


def write_pnm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pnm(pixels))
