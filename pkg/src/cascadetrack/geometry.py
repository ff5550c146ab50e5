"""Boxes, overlap, anchors, labeling and non-maximum suppression.

Boxes are center-form ``(cx, cy, w, h)`` internally. File boundaries use the
top-left corner form ``(x, y, w, h)``; convert with :meth:`Box.from_corner` and
:meth:`Box.to_corner`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels

MAX_LOG_SCALE = math.log(1000.0)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {vals}")
        for name, v in zip(("cx", "cy", "w", "h"), vals):
            object.__setattr__(self, name, float(v))

    @classmethod
    def from_corner(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def to_corner(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def to_xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])


@dataclass(frozen=True)
class OffsetVector:
    """Center shift in box units plus log scale factors, clamped to ``ln(1000)``."""

    rx: float
    ry: float
    rw: float
    rh: float

    def __post_init__(self):
        vals = (self.rx, self.ry, self.rw, self.rh)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite offsets {vals}")
        if abs(self.rw) > MAX_LOG_SCALE or abs(self.rh) > MAX_LOG_SCALE:
            raise ValueError(f"log-scale offsets out of range: {vals}")

    @classmethod
    def clamped(cls, rx: float, ry: float, rw: float, rh: float) -> "OffsetVector":
        def fix(v, lim=None):
            v = float(v)
            if math.isnan(v):
                return 0.0
            if lim is None:
                return min(max(v, -1e6), 1e6)
            return min(max(v, -lim), lim)

        return cls(fix(rx), fix(ry), fix(rw, MAX_LOG_SCALE), fix(rh, MAX_LOG_SCALE))

    @classmethod
    def zero(cls) -> "OffsetVector":
        return cls(0.0, 0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rw, self.rh])


@dataclass(frozen=True)
class AnchorSpec:
    ratios: tuple[float, ...]
    scales: tuple[float, ...]
    stride: float

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.ratios or min(self.ratios) <= 0:
            raise ValueError("anchor ratios must be non-empty and positive")
        if not self.scales or min(self.scales) <= 0:
            raise ValueError("anchor scales must be non-empty and positive")
        if not self.stride > 0:
            raise ValueError("anchor stride must be positive")

    @property
    def per_cell(self) -> int:
        return len(self.ratios) * len(self.scales)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*row) for row in np.asarray(arr, dtype=np.float64)]


def cxcywh_to_xyxy(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    half = arr[..., 2:] / 2.0
    return np.concatenate([arr[..., :2] - half, arr[..., :2] + half], axis=-1)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.to_xyxy()
    bx1, by1, bx2, by2 = b.to_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if a == b:
        return 1.0
    return min(1.0, inter / (a.area + b.area - inter))


def iou_many(box: Box, arr: np.ndarray) -> np.ndarray:
    """IoU of ``box`` against an ``(N, 4)`` center-form array."""
    return iou_matrix(box.as_array()[None], arr)[0]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = cxcywh_to_xyxy(np.asarray(a).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(b).reshape(-1, 4))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def decode_offsets(p: Box, r: OffsetVector) -> Box:
    return Box(p.cx + p.w * r.rx, p.cy + p.h * r.ry, p.w * math.exp(r.rw), p.h * math.exp(r.rh))


def encode_offsets(p: Box, target: Box) -> OffsetVector:
    return OffsetVector.clamped(
        (target.cx - p.cx) / p.w,
        (target.cy - p.cy) / p.h,
        math.log(target.w / p.w),
        math.log(target.h / p.h),
    )


def decode_offsets_array(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    rs = np.clip(r[:, 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return np.column_stack(
        [p[:, 0] + p[:, 2] * r[:, 0], p[:, 1] + p[:, 3] * r[:, 1], p[:, 2] * np.exp(rs[:, 0]), p[:, 3] * np.exp(rs[:, 1])]
    )


def encode_offsets_array(p: np.ndarray, target: np.ndarray) -> np.ndarray:
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), p.shape)
    out = np.column_stack(
        [(t[:, 0] - p[:, 0]) / p[:, 2], (t[:, 1] - p[:, 1]) / p[:, 3], np.log(t[:, 2] / p[:, 2]), np.log(t[:, 3] / p[:, 3])]
    )
    out[:, 2:] = np.clip(out[:, 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return out


def anchors_array(spec: AnchorSpec, grid_h: int, grid_w: int) -> np.ndarray:
    """``(grid_h * grid_w * per_cell, 4)`` anchors: row-major cell, then ratio, then scale."""
    shapes = np.array(
        [[s * math.sqrt(r), s / math.sqrt(r)] for r in spec.ratios for s in spec.scales], dtype=np.float64
    )
    ii, jj = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    centers = np.column_stack([(jj.ravel() + 0.5) * spec.stride, (ii.ravel() + 0.5) * spec.stride])
    k = len(shapes)
    return np.column_stack([np.repeat(centers, k, axis=0), np.tile(shapes, (len(centers), 1))])


def generate_anchors(spec: AnchorSpec, grid_h: int, grid_w: int) -> list[Box]:
    return array_to_boxes(anchors_array(spec, grid_h, grid_w))


def label_by_iou(anchors, gt: Box, pos_thr: float, neg_thr: float) -> np.ndarray:
    """Per-anchor labels: ``POSITIVE`` (1), ``NEGATIVE`` (0) or ``IGNORE`` (-1)."""
    if pos_thr < neg_thr:
        raise ValueError("pos_thr must be >= neg_thr")
    arr = anchors if isinstance(anchors, np.ndarray) else boxes_to_array(anchors)
    ov = iou_many(gt, arr)
    labels = np.full(len(arr), IGNORE, dtype=np.int8)
    labels[ov > pos_thr] = POSITIVE
    labels[ov < neg_thr] = NEGATIVE
    return labels


def nms(boxes, scores: Sequence[float], iou_thr: float, keep: int) -> list[int]:
    """Greedy NMS; equal scores resolve to the lower index."""
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(arr) != len(scores):
        raise ValueError(f"{len(arr)} boxes but {len(scores)} scores")
    if not 0.0 <= iou_thr <= 1.0:
        raise ValueError(f"iou_thr must lie in [0, 1], got {iou_thr}")
    if len(arr) == 0 or keep <= 0:
        return []
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept = kernels.nms(np.ascontiguousarray(cxcywh_to_xyxy(arr)), order.astype(np.int64), float(iou_thr), int(keep))
    return [int(i) for i in kept]
