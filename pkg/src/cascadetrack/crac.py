"""Cascaded refinement of coarse proposals: regress, re-pool at the regressed box, classify.

Classification fuses two scores per proposal: an offline identifier comparing
the aligned proposal against the first-frame target feature, and an online
ridge discriminator trained by conjugate gradient on binary-labeled samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal, Sequence

import numpy as np

from .geometry import Box, OffsetVector, decode_offsets, iou
from .nn import HeadParams, head_backward, head_forward
from .proposal import smooth_l1
from .roipool import PooledFeature, PyramidParams, pool_boxes
from .solver import solve_ridge
from .tensor import DenseLayerParams, FeatureMap, ShapeError, make_rng

MAX_LOG_SCALE = math.log(1000.0)
REG_WIDTHS = (128, 64, 4)
IDE_WIDTHS = (128, 64, 2)
DIS_WIDTHS = (64, 1)


@dataclass(frozen=True, eq=False)
class _HeadModel:
    conv: DenseLayerParams
    fcs: tuple[DenseLayerParams, ...]

    @cached_property
    def head(self) -> HeadParams:
        return HeadParams.from_layers(self.conv, list(self.fcs))

    @property
    def in_channels(self) -> int:
        return self.conv.in_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        return head_forward(self.head, x)[0]

    @classmethod
    def from_head(cls, p: HeadParams, **kw):
        conv, fcs = p.to_layers()
        return cls(conv, tuple(fcs), **kw)


@dataclass(frozen=True, eq=False)
class RegressorModel(_HeadModel):
    def __post_init__(self):
        if self.fcs[-1].out_dim != 4:
            raise ShapeError("regressor must end in 4 outputs")

    @classmethod
    def init(cls, channels: int, spatial: int = 36, seed: int = 0, zero_last: bool = False) -> "RegressorModel":
        p = HeadParams.init(make_rng(seed), 2 * channels, channels, spatial, list(REG_WIDTHS), zero_last=zero_last)
        return cls.from_head(p)


@dataclass(frozen=True, eq=False)
class IdentifierModel(_HeadModel):
    score_mode: Literal["softmax-positive", "cosine-fallback"] = "softmax-positive"

    def __post_init__(self):
        if self.score_mode not in ("softmax-positive", "cosine-fallback"):
            raise ValueError(f"unknown identifier mode {self.score_mode!r}")
        if self.score_mode == "softmax-positive" and self.fcs[-1].out_dim != 2:
            raise ShapeError("identifier must end in 2 outputs")

    @classmethod
    def init(cls, channels: int, spatial: int = 36, seed: int = 0, score_mode="softmax-positive") -> "IdentifierModel":
        p = HeadParams.init(make_rng(seed), 2 * channels, channels, spatial, list(IDE_WIDTHS))
        return cls.from_head(p, score_mode=score_mode)


@dataclass(frozen=True, eq=False)
class DiscriminatorModel(_HeadModel):
    """Frozen 1x1 conv followed by two fc layers; only the fc layers are trained online."""

    lam: float = 0.1

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if len(self.fcs) != 2 or self.fcs[-1].out_dim != 1:
            raise ShapeError("discriminator has two fc layers ending in one output")
        for f in self.fcs:
            if not (np.isfinite(f.weights).all() and np.isfinite(f.bias).all()):
                raise ValueError("discriminator weights must be finite")

    @classmethod
    def init(cls, channels: int, spatial: int = 36, seed: int = 0, lam: float = 0.1) -> "DiscriminatorModel":
        p = HeadParams.init(make_rng(seed), channels, channels, spatial, list(DIS_WIDTHS), zero_last=True)
        return cls.from_head(p, lam=lam)

    def with_fc(self, w1, b1, w2, b2) -> "DiscriminatorModel":
        fcs = (
            DenseLayerParams("fc", w1, b1, activation="relu"),
            DenseLayerParams("fc", np.reshape(w2, (1, -1)), np.reshape(b2, (1,))),
        )
        return DiscriminatorModel(self.conv, fcs, lam=self.lam)

    def weight_vector(self) -> np.ndarray:
        """All fc parameters flattened: ``W1, b1, w2, b2``."""
        return np.concatenate([np.ravel(a) for f in self.fcs for a in (f.weights, f.bias)]).astype(np.float64)


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return features.astype(np.float64, copy=False)
    return np.stack([f.data for f in features]).astype(np.float64)


def _pair_input(x: np.ndarray, f_init: np.ndarray) -> np.ndarray:
    if x.shape[1:] != f_init.shape:
        raise ShapeError(f"proposal feature {x.shape[1:]} and template feature {f_init.shape} differ")
    return np.concatenate([x, np.broadcast_to(f_init, x.shape)], axis=1)


# -- box regression -----------------------------------------------------------


def box_regress_batch(features, f_init, model: RegressorModel) -> np.ndarray:
    x = _pair_input(_stack(features), np.asarray(getattr(f_init, "data", f_init), dtype=np.float64))
    r = model.forward(x)
    r = np.nan_to_num(r, nan=0.0, posinf=1e6, neginf=-1e6)
    r[:, :2] = np.clip(r[:, :2], -1e6, 1e6)
    r[:, 2:] = np.clip(r[:, 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return r


def box_regress(f_i: PooledFeature, f_init: PooledFeature, model: RegressorModel) -> OffsetVector:
    if f_i.data.shape != f_init.data.shape:
        raise ShapeError(f"feature shapes differ: {f_i.data.shape} vs {f_init.data.shape}")
    return OffsetVector.clamped(*box_regress_batch([f_i], f_init, model)[0])


def align_proposal(p_box: Box, r: OffsetVector, phi34x: FeatureMap, pyramid: PyramidParams | None) -> tuple[Box, PooledFeature]:
    """Shift and rescale the proposal by ``r`` and re-pool at the adjusted box."""
    refined = decode_offsets(p_box, r)
    return refined, pool_boxes(phi34x, [refined], pyramid)[0]


# -- identification -----------------------------------------------------------


def identify_batch(features, f_init, model: IdentifierModel) -> np.ndarray:
    """``(N, 2)`` class probabilities; column 0 is the positive (target) class."""
    x = _stack(features)
    f0 = np.asarray(getattr(f_init, "data", f_init), dtype=np.float64)
    if model.score_mode == "cosine-fallback":
        a = x.reshape(len(x), -1)
        b = f0.ravel()
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b)
        cos = np.where(den > 0, a @ b / np.where(den > 0, den, 1.0), 0.0)
        pos = np.clip((1.0 + cos) / 2.0, 0.0, 1.0)
        return np.column_stack([pos, 1.0 - pos])
    logits = model.forward(_pair_input(x, f0))
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def identify(f: PooledFeature, f_init: PooledFeature, model: IdentifierModel) -> tuple[np.ndarray, float]:
    nu = identify_batch([f], f_init, model)[0]
    return nu, float(nu[0])


# -- discrimination -----------------------------------------------------------


def normalize_samples(x: np.ndarray) -> np.ndarray:
    """Scale each sample to norm ``sqrt(dim)`` so the discriminator ignores global gain."""
    x = _stack(x)
    flat = x.reshape(len(x), -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    scale = np.where(norms > 0, math.sqrt(flat.shape[1]) / safe, 0.0)
    return x * scale[:, None, None, None]


def _disc_hidden(model: DiscriminatorModel, x: np.ndarray) -> np.ndarray:
    """Output of the frozen conv stage, flattened: ``(N, C*S*S)``."""
    xn = normalize_samples(x)
    h = model.head
    z = np.einsum("oc,ncyx->noyx", h.conv_w, xn, optimize=True) + h.conv_b[None, :, None, None]
    return np.maximum(z, 0.0).reshape(len(xn), -1)


def _disc_raw(model: DiscriminatorModel, hidden: np.ndarray) -> np.ndarray:
    w1, w2 = model.head.fc_w
    b1, b2 = model.head.fc_b
    a = np.maximum(hidden @ w1.T + b1, 0.0)
    return (a @ w2.T + b2)[:, 0]


def discriminate_batch(features, model: DiscriminatorModel) -> np.ndarray:
    x = _stack(features)
    if len(x) == 0:
        return np.zeros(0)
    return np.clip(_disc_raw(model, _disc_hidden(model, x)), 0.0, 1.0)


def discriminate(f: PooledFeature, model: DiscriminatorModel) -> float:
    return float(discriminate_batch([f], model)[0])


# -- sample memory ------------------------------------------------------------

Origin = Literal["initial", "tracked", "hard-negative"]


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    feature: np.ndarray  # (C, S, S)
    label: float
    frame: int
    origin: Origin
    cycle: int = 0

    def __post_init__(self):
        if self.label not in (0.0, 1.0):
            raise ValueError(f"labels are binary, got {self.label}")
        if self.origin not in ("initial", "tracked", "hard-negative"):
            raise ValueError(f"unknown origin {self.origin!r}")


@dataclass
class SampleMemory:
    """Discriminator training set. Initial entries are pinned; others are evicted oldest first."""

    capacity: int
    entries: list[MemoryEntry] = field(default_factory=list)
    evicted: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, new: Sequence[MemoryEntry]) -> None:
        self.entries.extend(new)
        pinned = sum(e.origin == "initial" for e in self.entries)
        if pinned > self.capacity:
            raise ValueError(f"{pinned} initial samples exceed memory capacity {self.capacity}")
        excess = len(self.entries) - self.capacity
        if excess <= 0:
            return
        drop = set()
        for idx, e in enumerate(self.entries):
            if len(drop) == excess:
                break
            if e.origin != "initial":
                drop.add(idx)
        self.entries = [e for i, e in enumerate(self.entries) if i not in drop]
        self.evicted += len(drop)

    def select(self, min_cycle: int | None = None) -> list[MemoryEntry]:
        """Initial entries plus every other entry with ``cycle >= min_cycle``."""
        if min_cycle is None:
            return list(self.entries)
        return [e for e in self.entries if e.origin == "initial" or e.cycle >= min_cycle]

    @staticmethod
    def arrays(entries: Sequence[MemoryEntry]) -> tuple[np.ndarray, np.ndarray]:
        if not entries:
            raise ValueError("empty sample set")
        x = np.stack([e.feature for e in entries]).astype(np.float64)
        y = np.array([e.label for e in entries], dtype=np.float64)
        return x, y


def _as_xy(memory) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(memory, SampleMemory):
        return SampleMemory.arrays(memory.entries)
    if isinstance(memory, tuple):
        return _stack(memory[0]), np.asarray(memory[1], dtype=np.float64)
    return SampleMemory.arrays(memory)


def _objective_parts(hidden, y, w1, b1, w2, b2, lam):
    z1 = hidden @ w1.T + b1
    a = np.maximum(z1, 0.0)
    r = a @ w2 + b2 - y
    return float(r @ r + lam * (np.sum(w1 * w1) + w2 @ w2)), z1, a, r


def ridge_objective(memory, model: DiscriminatorModel, lam: float | None = None) -> float:
    """Sum of squared errors of the unclamped discriminator plus ``lam * ||fc weights||^2``.

    Biases are not penalized, so heavy regularization drives outputs to the label mean.
    """
    lam = model.lam if lam is None else lam
    x, y = _as_xy(memory)
    w1, b1 = model.head.fc_w[0], model.head.fc_b[0]
    w2, b2 = model.head.fc_w[1][0], model.head.fc_b[1][0]
    return _objective_parts(_disc_hidden(model, x), y, w1, b1, w2, b2, lam)[0]


def ridge_objective_grad(memory, model: DiscriminatorModel, lam: float | None = None) -> tuple[float, np.ndarray]:
    """Objective and its gradient in :meth:`DiscriminatorModel.weight_vector` order."""
    lam = model.lam if lam is None else lam
    x, y = _as_xy(memory)
    hidden = _disc_hidden(model, x)
    w1, b1 = model.head.fc_w[0], model.head.fc_b[0]
    w2, b2 = model.head.fc_w[1][0], model.head.fc_b[1][0]
    val, z1, a, r = _objective_parts(hidden, y, w1, b1, w2, b2, lam)
    g_w2 = 2 * (a.T @ r) + 2 * lam * w2
    g_b2 = 2 * r.sum()
    dz = 2 * np.outer(r, w2) * (z1 > 0)
    g_w1 = dz.T @ hidden + 2 * lam * w1
    g_b1 = dz.sum(axis=0)
    return val, np.concatenate([g_w1.ravel(), g_b1, g_w2, [g_b2]])


@dataclass
class TrainStats:
    objective_before: float
    objective_after: float
    cg_iterations: list[int] = field(default_factory=list)
    cg_residuals: list[float] = field(default_factory=list)


def train_discriminator(
    model: DiscriminatorModel,
    memory,
    lam: float | None = None,
    max_iters: int = 60,
    tol: float = 1e-6,
    rounds: int = 2,
    fc1_steps: int = 5,
    return_stats: bool = False,
):
    """Alternate an exact CG solve of the last layer with descent steps on the first fc layer.

    Every stage is accepted only if it does not raise the ridge objective.
    """
    lam = model.lam if lam is None else lam
    x, y = _as_xy(memory)
    if not np.isfinite(x).all():
        raise ValueError("non-finite discriminator features")
    hidden = _disc_hidden(model, x)
    w1 = model.head.fc_w[0].copy()
    b1 = model.head.fc_b[0].copy()
    w2 = model.head.fc_w[1][0].copy()
    b2 = float(model.head.fc_b[1][0])
    f0 = _objective_parts(hidden, y, w1, b1, w2, b2, lam)[0]
    stats = TrainStats(f0, f0)
    cur = f0

    def cg_last(w1, b1, w2, b2, cur):
        a = np.maximum(hidden @ w1.T + b1, 0.0)
        a1 = np.column_stack([a, np.ones(len(a))])
        penalty = np.ones(a1.shape[1])
        penalty[-1] = 0.0
        res = solve_ridge(a1, y, lam, penalty=penalty, x0=np.append(w2, b2), tol=tol, max_iters=max_iters)
        stats.cg_iterations.append(res.iterations)
        stats.cg_residuals.append(res.rel_residual)
        nw2, nb2 = res.x[:-1], float(res.x[-1])
        val = _objective_parts(hidden, y, w1, b1, nw2, nb2, lam)[0]
        if val <= cur:
            return nw2, nb2, val
        return w2, b2, cur

    w2, b2, cur = cg_last(w1, b1, w2, b2, cur)
    step = 0.05
    for _ in range(rounds):
        for _ in range(fc1_steps):
            val, z1, a, r = _objective_parts(hidden, y, w1, b1, w2, b2, lam)
            dz = 2 * np.outer(r, w2) * (z1 > 0)
            g_w1 = dz.T @ hidden + 2 * lam * w1
            g_b1 = dz.sum(axis=0)
            gnorm = math.sqrt(float(np.sum(g_w1 * g_w1) + g_b1 @ g_b1))
            if gnorm == 0.0:
                break
            scale = step * max(np.linalg.norm(w1), 1e-3) / gnorm
            accepted = False
            for _ in range(12):
                nw1, nb1 = w1 - scale * g_w1, b1 - scale * g_b1
                nval = _objective_parts(hidden, y, nw1, nb1, w2, b2, lam)[0]
                if nval < cur:
                    w1, b1, cur = nw1, nb1, nval
                    accepted = True
                    break
                scale *= 0.5
                step *= 0.5
            if not accepted:
                break
        w2, b2, cur = cg_last(w1, b1, w2, b2, cur)
    stats.objective_after = cur
    trained = model.with_fc(w1, b1, w2, b2)
    return (trained, stats) if return_stats else trained


# -- hard negatives, fusion, losses -------------------------------------------


def hard_negative_indices(boxes: Sequence[Box], scores, gt: Box, quota: int, max_iou: float = 0.3) -> list[int]:
    """Indices of the ``quota`` best-scored boxes overlapping ``gt`` by less than ``max_iou``."""
    if quota < 0:
        raise ValueError("quota must be non-negative")
    scores = np.asarray(scores, dtype=np.float64)
    eligible = [i for i, box in enumerate(boxes) if iou(box, gt) < max_iou]
    eligible.sort(key=lambda i: (-scores[i], i))
    return eligible[:quota]


def mine_hard_negatives(candidates, scores, gt: Box, quota: int, frame: int = 0, cycle: int = 0, max_iou: float = 0.3) -> list[MemoryEntry]:
    """Label-0 entries for the highest-scoring ``(feature, box)`` candidates away from ``gt``."""
    picked = hard_negative_indices([b for _, b in candidates], scores, gt, quota, max_iou)
    return [
        MemoryEntry(np.asarray(candidates[i][0].data, dtype=np.float32), 0.0, frame, "hard-negative", cycle)
        for i in picked
    ]


def fuse_scores(nu_pos, tau, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    nu_pos = np.asarray(nu_pos, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if alpha == 1.0:
        out = nu_pos.copy()
    elif alpha == 0.0:
        out = tau.copy()
    else:
        out = alpha * nu_pos + (1.0 - alpha) * tau
    return float(out) if out.ndim == 0 else out


def reg_loss(pred, target) -> float:
    p = pred.as_array() if isinstance(pred, OffsetVector) else np.asarray(pred, dtype=np.float64)
    t = target.as_array() if isinstance(target, OffsetVector) else np.asarray(target, dtype=np.float64)
    return float(np.sum(smooth_l1(p - t)))


def ide_loss(logits, label: int) -> float:
    """Softmax cross entropy of ``logits`` against the integer class ``label``."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    lse = m + math.log(np.exp(z - m).sum())
    return float(lse - z[label])


# -- batched training helpers (used by offline pretraining) -------------------


def reg_loss_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    d = pred - target
    ad = np.abs(d)
    loss = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum()
    grad = np.where(ad < 1.0, d, np.sign(d))
    return float(loss), grad


def ide_loss_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    p = np.exp(z - lse[:, None])
    n = len(labels)
    loss = float(np.sum(lse - z[np.arange(n), labels]))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g


def head_loss_grad(model_head: HeadParams, x: np.ndarray, dloss_fn, *args):
    out, cache = head_forward(model_head, x, keep=True)
    loss, dout = dloss_fn(out, *args)
    grads, dx = head_backward(model_head, cache, dout, need_input_grad=True)
    return loss, grads, dx
