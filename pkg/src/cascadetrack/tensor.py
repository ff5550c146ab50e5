"""Dense feature maps and the handful of neural operations built on them.

All maps are float32 ``(C, H, W)`` arrays; reductions inside ``conv2d`` and
``fully_connected`` accumulate in float64 and round once at the end.

Bilinear resampling uses the align-corners-false convention: output sample
``i`` reads the input at ``(i + 0.5) * in / out - 0.5``, clamped to the valid
index range. RoI pooling inherits the same sample-center convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator. PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray
    stride: float

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"feature map needs shape (C, H, W) with all dims >= 1, got {data.shape}")
        if not self.stride > 0:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if not np.isfinite(data).all():
            raise ValueError("feature map contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "stride", float(self.stride))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel_slice(self, start: int, stop: int) -> "FeatureMap":
        return FeatureMap(self.data[start:stop], self.stride)


Activation = Literal["none", "relu", "softmax"]


@dataclass(frozen=True, eq=False)
class DenseLayerParams:
    """Weights of a conv2d or fully-connected layer.

    conv2d weights are ``(out, in, kh, kw)``; fully-connected weights are
    ``(out, in)``. Bias is always ``(out,)``.
    """

    kind: Literal["conv2d", "fc"]
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    activation: Activation = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if self.kind == "conv2d":
            if w.ndim != 4:
                raise ShapeError(f"conv2d weights must be 4-d, got {w.shape}")
        elif self.kind == "fc":
            if w.ndim != 2:
                raise ShapeError(f"fc weights must be 2-d, got {w.shape}")
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        if self.activation not in ("none", "relu", "softmax"):
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        if self.kind != "conv2d":
            raise AttributeError("fully-connected layers have no kernel size")
        return self.weights.shape[2], self.weights.shape[3]

    @classmethod
    def conv1x1(cls, weights, bias=None, activation: Activation = "none") -> "DenseLayerParams":
        w = np.asarray(weights, dtype=np.float32)
        if bias is None:
            bias = np.zeros(w.shape[0], dtype=np.float32)
        return cls("conv2d", w.reshape(w.shape[0], w.shape[1], 1, 1), bias, activation=activation)


def _activate(x: np.ndarray, activation: str, axis: int) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "softmax":
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    return x


def conv2d(inp: FeatureMap, params: DenseLayerParams) -> FeatureMap:
    if params.kind != "conv2d":
        raise ShapeError(f"conv2d called with {params.kind} params")
    out_c, in_c, kh, kw = params.weights.shape
    if in_c != inp.channels:
        raise ShapeError(f"conv expects {in_c} input channels, map has {inp.channels}")
    p, s = params.padding, params.stride
    x = np.pad(inp.data.astype(np.float64), ((0, 0), (p, p), (p, p)))
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape[1:]}")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    y = np.einsum("chwij,ocij->ohw", win, params.weights.astype(np.float64), optimize=True)
    y += params.bias.astype(np.float64)[:, None, None]
    y = _activate(y, params.activation, axis=0)
    return FeatureMap(y.astype(np.float32), inp.stride * s)


def fully_connected(x, params: DenseLayerParams) -> np.ndarray:
    if params.kind != "fc":
        raise ShapeError(f"fully_connected called with {params.kind} params")
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size != params.in_dim:
        raise ShapeError(f"fc expects {params.in_dim} inputs, got {v.size}")
    y = params.weights.astype(np.float64) @ v + params.bias.astype(np.float64)
    return _activate(y, params.activation, axis=0).astype(np.float32)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` interpolation matrix for 1-d align-corners-false resizing."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(inp: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == (inp.height, inp.width):
        return inp
    my = bilinear_matrix(inp.height, out_h)
    mx = bilinear_matrix(inp.width, out_w)
    y = np.einsum("yh,chw,xw->cyx", my, inp.data.astype(np.float64), mx, optimize=True)
    # stride follows the coarser axis ratio; square maps keep it exact
    return FeatureMap(y.astype(np.float32), inp.stride * inp.height / out_h)


def concat_channels(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    if (a.height, a.width) != (b.height, b.width):
        raise ShapeError(f"spatial mismatch {a.height}x{a.width} vs {b.height}x{b.width}")
    if a.stride != b.stride:
        raise ShapeError(f"stride mismatch {a.stride} vs {b.stride}")
    return FeatureMap(np.concatenate([a.data, b.data], axis=0), a.stride)
