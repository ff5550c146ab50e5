"""Burn 1-px box outlines into a frame copy."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import Box
from .pnm import write_pnm

GREEN = (0, 255, 0)
RED = (255, 0, 0)


def render_overlay(pixels: np.ndarray, boxes: Sequence[tuple[Box, tuple[int, int, int]]], path=None) -> np.ndarray:
    """Outline each box on a copy of ``(C, H, W)`` uint8 ``pixels``.

    Box corners are rounded to pixel indices and both edges are drawn inclusive,
    so a 1x1 box recolors a 2x2 block. Anything off the canvas is clipped. A
    grayscale frame is promoted to RGB only when there is something to draw.
    """
    img = np.array(pixels, dtype=np.uint8, copy=True)
    if img.ndim == 2:
        img = img[None]
    if boxes and img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    _, h, w = img.shape
    for box, color in boxes:
        x1, y1, x2, y2 = (int(round(v)) for v in box.to_xyxy())
        col = np.asarray(color, dtype=np.uint8)[:, None]
        cx1, cx2 = max(x1, 0), min(x2, w - 1)
        cy1, cy2 = max(y1, 0), min(y2, h - 1)
        if cx1 <= cx2:
            for y in (y1, y2):
                if 0 <= y < h:
                    img[:, y, cx1 : cx2 + 1] = col
        if cy1 <= cy2:
            for x in (x1, x2):
                if 0 <= x < w:
                    img[:, cy1 : cy2 + 1, x] = col
    if path is not None:
        write_pnm(path, img)
    return img
