"""RoIAlign and pyramid RoIAlign over fused feature maps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import kernels
from .geometry import Box, array_to_boxes, boxes_to_array, cxcywh_to_xyxy
from .tensor import DenseLayerParams, FeatureMap, ShapeError, bilinear_matrix

SAMPLES_PER_BIN = 2


@dataclass(frozen=True, eq=False)
class PooledFeature:
    data: np.ndarray  # (C, S, S)
    box: Box
    kind: Literal["plain", "pyramid-fused"] = "plain"

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 3 or d.shape[1] != d.shape[2]:
            raise ShapeError(f"pooled feature must be (C, S, S), got {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("pooled feature contains non-finite values")
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class PyramidParams:
    levels: tuple[int, ...] = (6, 3, 1)
    fusion: DenseLayerParams | None = None

    def __post_init__(self):
        levels = tuple(int(s) for s in self.levels)
        if not levels or min(levels) < 1 or any(a <= b for a, b in zip(levels, levels[1:])):
            raise ValueError(f"pyramid levels must be non-empty, strictly decreasing and >= 1: {levels}")
        object.__setattr__(self, "levels", levels)
        if self.fusion is not None and self.fusion.in_dim % len(levels):
            raise ShapeError("fusion conv input channels must be a multiple of the level count")

    @property
    def out_size(self) -> int:
        return self.levels[0]

    def fusion_for(self, channels: int) -> DenseLayerParams:
        if self.fusion is None:
            return mean_level_fusion(channels, len(self.levels))
        if self.fusion.in_dim != channels * len(self.levels):
            raise ShapeError(
                f"fusion conv takes {self.fusion.in_dim} channels, {len(self.levels)} levels of {channels} give "
                f"{channels * len(self.levels)}"
            )
        return self.fusion


def mean_level_fusion(channels: int, n_levels: int) -> DenseLayerParams:
    w = np.zeros((channels, channels * n_levels), dtype=np.float32)
    for lvl in range(n_levels):
        w[np.arange(channels), lvl * channels + np.arange(channels)] = 1.0 / n_levels
    return DenseLayerParams.conv1x1(w)


def feature_rois(fmap: FeatureMap, boxes: np.ndarray) -> np.ndarray:
    """Image-space center boxes to feature-index ``(x1, y1, x2, y2)``; cell ``i`` is centered at ``i``."""
    return cxcywh_to_xyxy(boxes) / fmap.stride - 0.5


def roialign_batch(fmap: FeatureMap, boxes: np.ndarray, out_size: int, samples_per_bin: int = SAMPLES_PER_BIN) -> np.ndarray:
    if out_size < 1 or samples_per_bin < 1:
        raise ValueError("out_size and samples_per_bin must be >= 1")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return kernels.roialign(fmap.data, np.ascontiguousarray(feature_rois(fmap, boxes)), out_size, samples_per_bin)


def roialign(fmap: FeatureMap, box: Box, out: int, samples_per_bin: int = SAMPLES_PER_BIN) -> PooledFeature:
    data = roialign_batch(fmap, box.as_array()[None], out, samples_per_bin)[0]
    return PooledFeature(data, box, "plain")


def pyramid_stack_batch(fmap: FeatureMap, boxes: np.ndarray, levels=(6, 3, 1), samples_per_bin: int = SAMPLES_PER_BIN) -> np.ndarray:
    """Per-level pools upsampled to the largest level and stacked: ``(N, L*C, S, S)``."""
    big = levels[0]
    parts = []
    for s in levels:
        pooled = roialign_batch(fmap, boxes, s, samples_per_bin).astype(np.float64)
        if s != big:
            m = bilinear_matrix(s, big)
            pooled = np.einsum("ys,ncst,xt->ncyx", m, pooled, m, optimize=True)
        parts.append(pooled)
    return np.concatenate(parts, axis=1)


def apply_fusion(stack: np.ndarray, fusion: DenseLayerParams) -> np.ndarray:
    w = fusion.weights[:, :, 0, 0].astype(np.float64)
    out = np.einsum("oc,ncyx->noyx", w, stack, optimize=True) + fusion.bias.astype(np.float64)[None, :, None, None]
    return out.astype(np.float32)


def pyramid_roialign_batch(fmap: FeatureMap, boxes: np.ndarray, params: PyramidParams) -> np.ndarray:
    fusion = params.fusion_for(fmap.channels)
    return apply_fusion(pyramid_stack_batch(fmap, boxes, params.levels), fusion)


def pyramid_roialign(fmap: FeatureMap, box: Box, params: PyramidParams) -> PooledFeature:
    data = pyramid_roialign_batch(fmap, box.as_array()[None], params)[0]
    return PooledFeature(data, box, "pyramid-fused")


def pool_boxes(fmap: FeatureMap, boxes, pyramid: PyramidParams | None) -> list[PooledFeature]:
    """Pool many boxes at once; plain 6x6 RoIAlign when ``pyramid`` is None."""
    arr = boxes if isinstance(boxes, np.ndarray) else boxes_to_array(boxes)
    bx = array_to_boxes(arr)
    if pyramid is None:
        data = roialign_batch(fmap, arr, 6)
        return [PooledFeature(d, b, "plain") for d, b in zip(data, bx)]
    data = pyramid_roialign_batch(fmap, arr, pyramid)
    return [PooledFeature(d, b, "pyramid-fused") for d, b in zip(data, bx)]
