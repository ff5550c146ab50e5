"""Small fully-connected heads with hand-written backprop, plus Adam.

A head is a 1x1 convolution over pooled ``(C, S, S)`` features followed by
flattening and a stack of fully-connected layers. Hidden layers use ReLU;
the last layer is linear. Everything runs batched in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DenseLayerParams


def he_normal(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))


@dataclass
class HeadParams:
    """Mutable float64 parameters: ``conv = (W, b)``, ``fcs = [(W, b), ...]``."""

    conv_w: np.ndarray
    conv_b: np.ndarray
    fc_w: list[np.ndarray]
    fc_b: list[np.ndarray]
    conv_relu: bool = True

    @classmethod
    def init(cls, rng, in_channels: int, conv_out: int, spatial: int, widths: list[int], zero_last: bool = False):
        conv_w = he_normal(rng, conv_out, in_channels)
        conv_b = np.zeros(conv_out)
        dims = [conv_out * spatial] + list(widths)
        fc_w, fc_b = [], []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            last = i == len(dims) - 2
            w = np.zeros((b, a)) if (last and zero_last) else he_normal(rng, b, a) * (0.5 if last else 1.0)
            fc_w.append(w)
            fc_b.append(np.zeros(b))
        return cls(conv_w, conv_b, fc_w, fc_b)

    def arrays(self) -> list[np.ndarray]:
        out = [self.conv_w, self.conv_b]
        for w, b in zip(self.fc_w, self.fc_b):
            out += [w, b]
        return out

    def copy(self) -> "HeadParams":
        return HeadParams(
            self.conv_w.copy(), self.conv_b.copy(), [w.copy() for w in self.fc_w], [b.copy() for b in self.fc_b], self.conv_relu
        )

    def to_layers(self) -> tuple[DenseLayerParams, list[DenseLayerParams]]:
        conv = DenseLayerParams.conv1x1(self.conv_w, self.conv_b, "relu" if self.conv_relu else "none")
        fcs = []
        for i, (w, b) in enumerate(zip(self.fc_w, self.fc_b)):
            act = "relu" if i < len(self.fc_w) - 1 else "none"
            fcs.append(DenseLayerParams("fc", w, b, activation=act))
        return conv, fcs

    @classmethod
    def from_layers(cls, conv: DenseLayerParams, fcs: list[DenseLayerParams]) -> "HeadParams":
        return cls(
            conv.weights[:, :, 0, 0].astype(np.float64),
            conv.bias.astype(np.float64),
            [f.weights.astype(np.float64) for f in fcs],
            [f.bias.astype(np.float64) for f in fcs],
            conv.activation == "relu",
        )


def head_forward(p: HeadParams, x: np.ndarray, keep: bool = False):
    """``x`` is ``(B, Cin, S, S)``; returns ``(B, out)`` and an optional cache."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    z = np.einsum("oc,ncyx->noyx", p.conv_w, x, optimize=True) + p.conv_b[None, :, None, None]
    a = np.maximum(z, 0.0) if p.conv_relu else z
    h = a.reshape(n, -1)
    acts = [h]
    pre = []
    for i, (w, b) in enumerate(zip(p.fc_w, p.fc_b)):
        zz = h @ w.T + b
        pre.append(zz)
        h = np.maximum(zz, 0.0) if i < len(p.fc_w) - 1 else zz
        acts.append(h)
    if not keep:
        return h, None
    return h, (x, z, acts, pre)


def head_backward(p: HeadParams, cache, dout: np.ndarray, need_input_grad: bool = False):
    """Gradients in the order of :meth:`HeadParams.arrays`, plus ``dx`` when requested."""
    x, z, acts, pre = cache
    n = x.shape[0]
    fc_grads = []
    d = dout
    for i in range(len(p.fc_w) - 1, -1, -1):
        if i < len(p.fc_w) - 1:
            d = d * (pre[i] > 0)
        fc_grads.append((d.T @ acts[i], d.sum(axis=0)))
        d = d @ p.fc_w[i]
    fc_grads.reverse()
    dz = d.reshape(z.shape)
    if p.conv_relu:
        dz = dz * (z > 0)
    conv_w = np.einsum("noyx,ncyx->oc", dz, x, optimize=True)
    conv_b = dz.sum(axis=(0, 2, 3))
    grads = [conv_w, conv_b]
    for gw, gb in fc_grads:
        grads += [gw, gb]
    if need_input_grad:
        dx = np.einsum("noyx,oc->ncyx", dz, p.conv_w, optimize=True)
        return grads, dx
    return grads, None


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(q) for q in params]
        self.v = [np.zeros_like(q) for q in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for q, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.wd and q.ndim > 1:
                g = g + self.wd * q
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            q -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
