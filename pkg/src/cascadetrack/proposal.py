"""Coarse proposals: anchor scoring by template/search correlation, NMS, top N.

Correlation-only mode is training-free: every anchor takes the normalized
cross-correlation response of its grid cell and keeps its own shape. Trained
mode adds two minimal per-cell 1x1 heads (classification and offsets) over
the response and the search features; it is a stand-in, not a faithful RPN.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import kernels
from .geometry import NEGATIVE, POSITIVE, Box, boxes_to_array, decode_offsets_array, encode_offsets_array, label_by_iou, nms
from .nn import Adam
from .tensor import DenseLayerParams, FeatureMap, ShapeError, make_rng

PROB_EPS = 1e-7


@dataclass(frozen=True)
class Proposal:
    box: Box
    coarse_score: float
    anchor_index: int = -1

    def __post_init__(self):
        s = float(self.coarse_score)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"coarse score must lie in [0, 1], got {s}")
        object.__setattr__(self, "coarse_score", s)


@dataclass(frozen=True, eq=False)
class RpnHeads:
    mode: Literal["correlation-only", "trained"] = "correlation-only"
    cls: DenseLayerParams | None = None
    reg: DenseLayerParams | None = None

    def __post_init__(self):
        if self.mode not in ("correlation-only", "trained"):
            raise ValueError(f"unknown RPN mode {self.mode!r}")
        if self.mode == "trained":
            if self.cls is None or self.reg is None:
                raise ValueError("trained mode needs both heads")
            if self.reg.out_dim != 4 * self.cls.out_dim or self.reg.in_dim != self.cls.in_dim:
                raise ShapeError("regression head must emit 4 offsets per classification output")

    @property
    def per_cell(self) -> int | None:
        return None if self.cls is None else self.cls.out_dim

    @classmethod
    def init_trained(cls, channels: int, per_cell: int, seed: int = 0) -> "RpnHeads":
        rng = make_rng(seed)
        cin = channels + 1
        wc = rng.normal(0.0, 0.01, size=(per_cell, cin))
        wr = np.zeros((4 * per_cell, cin))
        return cls(
            "trained",
            DenseLayerParams.conv1x1(wc, np.zeros(per_cell)),
            DenseLayerParams.conv1x1(wr, np.zeros(4 * per_cell)),
        )


def xcorr(template: FeatureMap, search: FeatureMap) -> FeatureMap:
    """Normalized cross-correlation mapped from ``[-1, 1]`` to ``[0, 1]``."""
    if template.channels != search.channels:
        raise ShapeError(f"channel mismatch: template {template.channels}, search {search.channels}")
    if template.height > search.height or template.width > search.width:
        raise ShapeError(f"template {template.shape} larger than search {search.shape}")
    r = kernels.ncc(template.data, search.data)
    return FeatureMap(((r + 1.0) / 2.0)[None].astype(np.float32), search.stride)


def _window_weights(n_cells: int, n_windows: int, k: int) -> np.ndarray:
    """``(n_cells, n_windows)`` weights reading the window centered on each cell center.

    Window ``a`` covers cells ``a .. a+k-1``; its center matches cell ``i`` when
    ``a = i + 0.5 - k/2``. Even ``k`` lands halfway between two windows, which
    are averaged. Indices are clamped to the valid range.
    """
    pos = np.arange(n_cells) + 0.5 - k / 2.0
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    m = np.zeros((n_cells, n_windows))
    rows = np.arange(n_cells)
    np.add.at(m, (rows, np.clip(lo, 0, n_windows - 1)), 1.0 - frac)
    np.add.at(m, (rows, np.clip(lo + 1, 0, n_windows - 1)), frac)
    return m


def anchor_cells(anchors: np.ndarray, stride: float, grid_h: int, grid_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid cell holding each anchor center."""
    i = np.clip(np.floor(anchors[:, 1] / stride).astype(np.int64), 0, grid_h - 1)
    j = np.clip(np.floor(anchors[:, 0] / stride).astype(np.int64), 0, grid_w - 1)
    return i, j


def response_on_grid(template: FeatureMap, search: FeatureMap) -> np.ndarray:
    """Correlation response resampled onto the search grid.

    Cell ``(i, j)`` gets the response of the template window centered on that
    cell's center, interpolated between windows for even template sides.
    """
    r = xcorr(template, search).data[0].astype(np.float64)
    wy = _window_weights(search.height, r.shape[0], template.height)
    wx = _window_weights(search.width, r.shape[1], template.width)
    return wy @ r @ wx.T


def head_input(template: FeatureMap, search: FeatureMap) -> np.ndarray:
    """``(C + 1, H, W)`` per-cell input of the trained heads: response then search features."""
    return np.concatenate([response_on_grid(template, search)[None], search.data], axis=0).astype(np.float64)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def head_outputs(heads: RpnHeads, inp: np.ndarray, anchors: np.ndarray, stride: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-anchor ``(scores, offsets, logits)`` from the trained heads."""
    k = heads.per_cell
    wc = heads.cls.weights[:, :, 0, 0].astype(np.float64)
    wr = heads.reg.weights[:, :, 0, 0].astype(np.float64)
    _, h, w = inp.shape
    if len(anchors) != h * w * k:
        raise ShapeError(f"{len(anchors)} anchors for a {h}x{w} grid with {k} per cell")
    flat = inp.reshape(inp.shape[0], -1)  # (Cin, H*W)
    logits = (wc @ flat + heads.cls.bias[:, None]).T.reshape(-1)  # cell-major, then anchor
    offs = (wr @ flat + heads.reg.bias[:, None]).T.reshape(-1, 4)
    return _sigmoid(logits), offs, logits


def extract_proposals(
    template: FeatureMap,
    search: FeatureMap,
    anchors,
    heads: RpnHeads,
    n: int,
    nms_thr: float,
) -> list[Proposal]:
    """Top-``n`` anchors after NMS, sorted by coarse score; ties keep the lower anchor index.

    ``template`` is the target-region kernel and ``search`` the fused search map;
    anchors must lie on the search grid in patch pixels.
    """
    if n < 1:
        raise ValueError("proposal count must be >= 1")
    arr = anchors if isinstance(anchors, np.ndarray) else boxes_to_array(anchors)
    if heads.mode == "correlation-only":
        resp = response_on_grid(template, search)
        i, j = anchor_cells(arr, search.stride, search.height, search.width)
        scores = resp[i, j].astype(np.float64)
        boxes = arr
    else:
        scores, offs, _ = head_outputs(heads, head_input(template, search), arr, search.stride)
        boxes = decode_offsets_array(arr, offs)
    scores = np.clip(scores, 0.0, 1.0)
    keep = nms(boxes, scores, nms_thr, n)
    return [Proposal(Box(*boxes[k]), float(scores[k]), int(k)) for k in keep]


# -- trained-mode losses ------------------------------------------------------


def smooth_l1(d):
    d = np.abs(np.asarray(d, dtype=np.float64))
    out = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return float(out) if out.ndim == 0 else out


def rpn_loss(pred_scores, pred_offsets, anchors, gt: Box, thresholds=(0.6, 0.3)) -> float:
    return rpn_loss_grad(pred_scores, pred_offsets, anchors, gt, thresholds)[0]


def rpn_loss_grad(pred_scores, pred_offsets, anchors, gt: Box, thresholds=(0.6, 0.3)):
    """Loss plus gradients with respect to the scores and the offsets.

    Binary cross entropy is averaged over labeled anchors with probabilities
    clamped to ``[1e-7, 1 - 1e-7]``; smooth-L1 is summed over the four offset
    components and averaged over positive anchors.
    """
    arr = anchors if isinstance(anchors, np.ndarray) else boxes_to_array(anchors)
    p = np.asarray(pred_scores, dtype=np.float64)
    o = np.asarray(pred_offsets, dtype=np.float64).reshape(-1, 4)
    pos_thr, neg_thr = thresholds
    labels = label_by_iou(arr, gt, pos_thr, neg_thr)
    lab = labels != -1
    g_p = np.zeros_like(p)
    g_o = np.zeros_like(o)
    loss = 0.0
    n_lab = int(lab.sum())
    if n_lab:
        y = (labels[lab] == POSITIVE).astype(np.float64)
        pc = np.clip(p[lab], PROB_EPS, 1.0 - PROB_EPS)
        loss += float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
        inside = (p[lab] > PROB_EPS) & (p[lab] < 1.0 - PROB_EPS)
        g_p[lab] = np.where(inside, (-(y / pc) + (1 - y) / (1 - pc)) / n_lab, 0.0)
    pos = labels == POSITIVE
    n_pos = int(pos.sum())
    if n_pos:
        tgt = encode_offsets_array(arr[pos], gt.as_array())
        d = o[pos] - tgt
        loss += float(np.sum(smooth_l1(d)) / n_pos)
        g_o[pos] = np.where(np.abs(d) < 1.0, d, np.sign(d)) / n_pos
    return loss, g_p, g_o


def rpn_head_loss_grad(heads: RpnHeads, inp: np.ndarray, anchors: np.ndarray, gt: Box, stride: float, thresholds=(0.6, 0.3), sample=None):
    """Loss and gradients for ``[cls W, cls b, reg W, reg b]`` (1x1 weights as 2-d)."""
    scores, offs, logits = head_outputs(heads, inp, anchors, stride)
    if sample is not None:
        mask = np.zeros(len(anchors), dtype=bool)
        mask[sample] = True
        anchors_used = anchors[mask]
        loss, g_p, g_o = rpn_loss_grad(scores[mask], offs[mask], anchors_used, gt, thresholds)
        gp_full = np.zeros_like(scores)
        go_full = np.zeros_like(offs)
        gp_full[mask], go_full[mask] = g_p, g_o
        g_p, g_o = gp_full, go_full
    else:
        loss, g_p, g_o = rpn_loss_grad(scores, offs, anchors, gt, thresholds)
    k = heads.per_cell
    cin, h, w = inp.shape
    flat = inp.reshape(cin, -1)
    # the clamp in the loss has zero gradient outside, handled above
    g_logit = (g_p * scores * (1.0 - scores)).reshape(h * w, k).T  # (K, HW)
    g_off = g_o.reshape(h * w, 4 * k).T  # (4K, HW)
    grads = [g_logit @ flat.T, g_logit.sum(axis=1), g_off @ flat.T, g_off.sum(axis=1)]
    return loss, grads


def train_rpn(
    heads: RpnHeads,
    pairs: Sequence[tuple[FeatureMap, FeatureMap, Box]],
    anchors: np.ndarray,
    epochs: int = 20,
    lr: float = 1e-2,
    samples_per_pair: int = 64,
    seed: int = 0,
    thresholds=(0.6, 0.3),
) -> RpnHeads:
    """Fit the two heads with Adam on ``(template, search, gt-in-patch)`` triples.

    Each pair contributes at most ``samples_per_pair`` labeled anchors per step,
    a quarter of them positive when available.
    """
    if heads.mode != "trained":
        raise ValueError("only trained-mode heads can be fitted")
    rng = make_rng(seed)
    params = [
        heads.cls.weights[:, :, 0, 0].astype(np.float64),
        heads.cls.bias.astype(np.float64),
        heads.reg.weights[:, :, 0, 0].astype(np.float64),
        heads.reg.bias.astype(np.float64),
    ]
    opt = Adam(params, lr=lr)
    inputs = [(head_input(t, s), s.stride, gt) for t, s, gt in pairs]

    def current():
        return RpnHeads(
            "trained",
            DenseLayerParams.conv1x1(params[0], params[1]),
            DenseLayerParams.conv1x1(params[2], params[3]),
        )

    for _ in range(epochs):
        for inp, stride, gt in inputs:
            labels = label_by_iou(anchors, gt, *thresholds)
            pos = np.flatnonzero(labels == POSITIVE)
            neg = np.flatnonzero(labels == NEGATIVE)
            n_pos = min(len(pos), samples_per_pair // 4)
            pick = np.concatenate([
                rng.choice(pos, n_pos, replace=False) if n_pos else np.zeros(0, np.int64),
                rng.choice(neg, min(len(neg), samples_per_pair - n_pos), replace=False),
            ]).astype(np.int64)
            _, grads = rpn_head_loss_grad(current(), inp, anchors, gt, stride, thresholds, sample=pick)
            opt.step(grads)
    return current()
