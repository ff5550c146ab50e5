"""Vectorized numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` module; used when
the extension is unavailable or ``CASCADETRACK_PURE_PYTHON`` is set.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def _interp_weights(coords: np.ndarray, n: int) -> np.ndarray:
    """``(..., n)`` bilinear weights for sample coordinates, zero outside ``[0, n-1]``."""
    c = np.asarray(coords, dtype=np.float64)
    i0 = np.floor(c).astype(np.int64)
    f = c - i0
    w = np.zeros(c.shape + (n,))
    for idx, wt in ((i0, 1.0 - f), (i0 + 1, f)):
        ok = (idx >= 0) & (idx < n)
        sel = np.nonzero(ok)
        np.add.at(w, sel + (idx[sel],), wt[sel])
    return w


def _bin_matrix(lo: np.ndarray, hi: np.ndarray, out_size: int, spb: int, n: int) -> np.ndarray:
    # sample positions: lo + (bin + (k + 0.5) / spb) * bin_len
    bins = np.arange(out_size)[:, None] + (np.arange(spb)[None, :] + 0.5) / spb
    step = (hi - lo) / out_size
    coords = lo[:, None, None] + bins[None] * step[:, None, None]
    return _interp_weights(coords, n).mean(axis=2)


def roialign(data: np.ndarray, rois: np.ndarray, out_size: int, spb: int) -> np.ndarray:
    """Pool ``(N, 4)`` regions given in feature-index coordinates ``(x1, y1, x2, y2)``."""
    c, h, w = data.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if len(rois) == 0:
        return np.zeros((0, c, out_size, out_size), dtype=np.float32)
    py = _bin_matrix(rois[:, 1], rois[:, 3], out_size, spb, h)
    px = _bin_matrix(rois[:, 0], rois[:, 2], out_size, spb, w)
    out = np.einsum("nsh,chw,ntw->ncst", py, data.astype(np.float64), px, optimize=True)
    return out.astype(np.float32)


def nms(xyxy: np.ndarray, order: np.ndarray, iou_thr: float, keep: int) -> np.ndarray:
    areas = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
    order = np.asarray(order, dtype=np.int64)
    kept = []
    while order.size and len(kept) < keep:
        i = order[0]
        kept.append(i)
        rest = order[1:]
        iw = np.minimum(xyxy[i, 2], xyxy[rest, 2]) - np.maximum(xyxy[i, 0], xyxy[rest, 0])
        ih = np.minimum(xyxy[i, 3], xyxy[rest, 3]) - np.maximum(xyxy[i, 1], xyxy[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ov = inter / (areas[i] + areas[rest] - inter)
        order = rest[ov <= iou_thr]
    return np.array(kept, dtype=np.int64)


def ncc(template: np.ndarray, search: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation over valid positions.

    Each channel of the template and of every search window is made zero-mean;
    the correlation is normalized by the joint L2 norms. Flat windows give 0.
    """
    c, th, tw = template.shape
    n = th * tw
    t = template.astype(np.float64)
    t = t - t.mean(axis=(1, 2), keepdims=True)
    tnorm = np.sqrt((t * t).sum())
    s = search.astype(np.float64)
    win = np.lib.stride_tricks.sliding_window_view(s, (th, tw), axis=(1, 2))
    num = np.einsum("cyxij,cij->yx", win, t, optimize=True)
    sums = win.sum(axis=(3, 4))
    sq = (win * win).sum(axis=(3, 4))
    var = (sq - sums * sums / n).sum(axis=0)
    total = sq.sum(axis=0)
    var = np.maximum(var, 0.0)
    den = tnorm * np.sqrt(var)
    flat = (var <= 1e-9 * total) | (den <= 0.0)
    out = np.where(flat, 0.0, num / np.where(flat, 1.0, den))
    return np.clip(out, -1.0, 1.0)


def sample_grid(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, pad: np.ndarray) -> np.ndarray:
    """Bilinear samples on the separable grid ``ys x xs``; reads outside the image return ``pad``."""
    c, h, w = img.shape
    wy = _interp_weights(ys, h)
    wx = _interp_weights(xs, w)
    pad = np.asarray(pad, dtype=np.float64).reshape(c, 1, 1)
    centered = img.astype(np.float64) - pad
    out = np.einsum("yh,chw,xw->cyx", wy, centered, wx, optimize=True) + pad
    return out.astype(np.float32)
