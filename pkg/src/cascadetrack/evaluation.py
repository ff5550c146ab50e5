"""One-pass evaluation metrics and the comma-separated box annotation format."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box, iou

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_RADIUS = 20.0


class AnnotationError(ValueError):
    pass


@dataclass
class EvalResult:
    per_frame_iou: list[float]
    per_frame_center_error: list[float]
    precision: float
    success_curve: list[float]
    success_auc: float
    fps: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "precision": self.precision,
            "success_auc": self.success_auc,
            "per_frame_iou": self.per_frame_iou,
            "fps": self.fps,
        }


def center_error(a: Box, b: Box) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def success_curve(ious: Sequence[float]) -> np.ndarray:
    """Fraction of frames with IoU strictly above each of the 21 thresholds."""
    v = np.asarray(ious, dtype=np.float64)
    return (v[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)


def eval_ope(pred: Sequence[Box], gt: Sequence[Box], fps: float = 0.0) -> EvalResult:
    """Score a one-pass run; the first (initialization) frame is excluded."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted boxes but {len(gt)} ground-truth boxes")
    if len(gt) < 2:
        raise ValueError("need at least two frames: the first one is the initialization")
    ious = [iou(p, g) for p, g in zip(pred[1:], gt[1:])]
    errs = [center_error(p, g) for p, g in zip(pred[1:], gt[1:])]
    curve = success_curve(ious)
    return EvalResult(
        ious,
        errs,
        float(np.mean(np.asarray(errs) <= PRECISION_RADIUS)),
        curve.tolist(),
        float(curve.mean()),
        float(fps),
    )


_SPLIT = re.compile(r"[,\t]")


def parse_annotations(text: str) -> list[Box]:
    boxes = []
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in _SPLIT.split(line)]
        if len(parts) != 4:
            raise AnnotationError(f"line {lineno}: expected 4 values x,y,w,h, got {len(parts)}: {raw!r}")
        try:
            x, y, w, h = (float(p) for p in parts)
        except ValueError:
            raise AnnotationError(f"line {lineno}: non-numeric value in {raw!r}") from None
        try:
            boxes.append(Box.from_corner(x, y, w, h))
        except ValueError as e:
            raise AnnotationError(f"line {lineno}: {e}") from None
    return boxes


def _num(v: float) -> str:
    s = f"{v:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def format_annotations(boxes: Sequence[Box]) -> str:
    return "".join(",".join(_num(v) for v in b.to_corner()) + "\n" for b in boxes)


def read_annotations(path) -> list[Box]:
    return parse_annotations(Path(path).read_text())


def write_annotations(path, boxes: Sequence[Box]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(format_annotations(boxes))
