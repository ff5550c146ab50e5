"""Training-free two-level feature extraction and template/search cropping.

Level 3 features have stride 8, level 4 stride 16. The fused map resizes
level 3 onto the level 4 grid, concatenates the two and mixes them with a
1x1 convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import kernels
from .geometry import Box
from .pnm import read_pnm
from .tensor import DenseLayerParams, FeatureMap, ShapeError, concat_channels, conv2d, make_rng, resize_bilinear

HANDCRAFTED_CHANNELS = 8
# gradient channels are scaled up so they sit in the same range as intensity
GRAD_GAIN = 8.0


@dataclass(frozen=True, eq=False)
class ImagePatch:
    data: np.ndarray  # (C, H, W) float32 in [0, 1]

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3 or d.shape[0] not in (1, 3) or min(d.shape) < 1:
            raise ShapeError(f"image patch must be (1|3, H, W), got {d.shape}")
        if not np.isfinite(d).all() or d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        d = np.ascontiguousarray(d)
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_uint8(cls, pixels: np.ndarray) -> "ImagePatch":
        return cls(np.asarray(pixels, dtype=np.float32) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.data * 255.0), 0, 255).astype(np.uint8)

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[0]
        return self.data.mean(axis=0, dtype=np.float64).astype(np.float32)


def load_image(path) -> ImagePatch:
    return ImagePatch.from_uint8(read_pnm(path))


@dataclass(frozen=True)
class CropTransform:
    """Axis-aligned similarity between image and patch: ``patch = (image - origin) * scale``."""

    origin_x: float
    origin_y: float
    scale: float
    size: int

    def box_to_patch(self, box: Box) -> Box:
        return Box((box.cx - self.origin_x) * self.scale, (box.cy - self.origin_y) * self.scale, box.w * self.scale, box.h * self.scale)

    def box_to_image(self, box: Box) -> Box:
        return Box(box.cx / self.scale + self.origin_x, box.cy / self.scale + self.origin_y, box.w / self.scale, box.h / self.scale)

    def array_to_image(self, arr: np.ndarray) -> np.ndarray:
        out = np.array(arr, dtype=np.float64)
        out[:, 0] = out[:, 0] / self.scale + self.origin_x
        out[:, 1] = out[:, 1] / self.scale + self.origin_y
        out[:, 2:] /= self.scale
        return out


def crop_region(image: ImagePatch, box: Box, context: float, out_size: int) -> tuple[ImagePatch, CropTransform]:
    """Square crop of side ``context * sqrt(w * h)`` around ``box``, resampled to ``out_size``.

    Area outside the image reads as the per-channel image mean.
    """
    if context < 1:
        raise ValueError(f"context must be >= 1, got {context}")
    if out_size < 16 or out_size % 16:
        raise ValueError(f"out_size must be a positive multiple of 16, got {out_size}")
    side = context * math.sqrt(box.w * box.h)
    if not (math.isfinite(side) and side > 0):
        raise ValueError(f"degenerate box {box}")
    scale = out_size / side
    ox, oy = box.cx - side / 2.0, box.cy - side / 2.0
    centers = (np.arange(out_size) + 0.5) / scale
    xs = ox + centers - 0.5
    ys = oy + centers - 0.5
    pad = image.data.mean(axis=(1, 2), dtype=np.float64)
    data = kernels.sample_grid(image.data, ys, xs, pad)
    np.clip(data, 0.0, 1.0, out=data)
    return ImagePatch(data), CropTransform(ox, oy, scale, out_size)


@dataclass(frozen=True, eq=False)
class BackboneParams:
    mode: Literal["handcrafted", "seeded-random-conv"] = "handcrafted"
    channels: int = HANDCRAFTED_CHANNELS
    fusion: DenseLayerParams | None = None
    seed: int = 0
    conv3: DenseLayerParams | None = field(default=None, repr=False)
    conv4: DenseLayerParams | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("handcrafted", "seeded-random-conv"):
            raise ValueError(f"unknown backbone mode {self.mode!r}")
        if self.mode == "handcrafted" and self.channels != HANDCRAFTED_CHANNELS:
            raise ValueError(f"handcrafted features have {HANDCRAFTED_CHANNELS} channels")
        c = self.channels
        if self.fusion is None:
            object.__setattr__(self, "fusion", average_fusion(c))
        if self.fusion.in_dim != 2 * c:
            raise ShapeError(f"fusion conv takes {self.fusion.in_dim} channels, levels give {2 * c}")
        if self.mode == "seeded-random-conv" and self.conv3 is None:
            rng = make_rng(self.seed)
            w3 = rng.normal(0.0, 1.0 / 8.0, size=(c, 1, 8, 8))
            w4 = rng.normal(0.0, 1.0 / math.sqrt(4 * c), size=(c, c, 2, 2))
            object.__setattr__(self, "conv3", DenseLayerParams("conv2d", w3, np.zeros(c), stride=8, activation="relu"))
            object.__setattr__(self, "conv4", DenseLayerParams("conv2d", w4, np.zeros(c), stride=2, activation="relu"))


def average_fusion(c: int) -> DenseLayerParams:
    """1x1 conv that averages matching level-3 and level-4 channels."""
    w = np.zeros((c, 2 * c), dtype=np.float32)
    w[np.arange(c), np.arange(c)] = 0.5
    w[np.arange(c), c + np.arange(c)] = 0.5
    return DenseLayerParams.conv1x1(w)


def _cell_mean(x: np.ndarray, cell: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // cell, cell, w // cell, cell).mean(axis=(2, 4))


def _handcrafted_pixels(gray: np.ndarray) -> np.ndarray:
    g = gray.astype(np.float64)
    gy, gx = np.gradient(g)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / 4)).astype(np.int64), 3)
    hist = [np.where(bins == b, mag, 0.0) for b in range(4)]
    return np.stack([g - 0.5, GRAD_GAIN * gx, GRAD_GAIN * gy, GRAD_GAIN * mag] + [GRAD_GAIN * hb for hb in hist])


def extract_features(patch: ImagePatch, params: BackboneParams) -> tuple[FeatureMap, FeatureMap]:
    h, w = patch.height, patch.width
    if h % 16 or w % 16:
        raise ValueError(f"patch sides must be multiples of 16, got {h}x{w}")
    if params.mode == "handcrafted":
        px = _handcrafted_pixels(patch.gray())
        phi3 = _cell_mean(px, 8)
        phi4 = _cell_mean(px, 16)
        return FeatureMap(phi3.astype(np.float32), 8.0), FeatureMap(phi4.astype(np.float32), 16.0)
    img = FeatureMap(patch.gray()[None], 1.0)
    phi3 = conv2d(img, params.conv3)
    phi4 = conv2d(phi3, params.conv4)
    return phi3, phi4


def fuse_features(phi3: FeatureMap, phi4: FeatureMap, params: BackboneParams) -> FeatureMap:
    if phi3.channels + phi4.channels != params.fusion.in_dim:
        raise ShapeError(f"fusion conv takes {params.fusion.in_dim} channels, got {phi3.channels}+{phi4.channels}")
    up = resize_bilinear(phi3, phi4.height, phi4.width)
    return conv2d(concat_channels(up, phi4), params.fusion)


def fused_features(patch: ImagePatch, params: BackboneParams) -> FeatureMap:
    phi3, phi4 = extract_features(patch, params)
    return fuse_features(phi3, phi4, params)
