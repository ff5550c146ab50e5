"""Brute-force scalar reference implementations and the comparison suite run by ``oracle``.

The references use plain Python loops over float64 scalars and share no code
with the vectorized or compiled kernels they check.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .geometry import Box, decode_offsets_array, encode_offsets_array, nms
from .proposal import xcorr
from .roipool import roialign_batch
from .solver import solve_ridge
from .tensor import DenseLayerParams, FeatureMap, conv2d, fully_connected, make_rng, resize_bilinear


def conv2d_ref(x, w, b, stride=1, pad=0, relu=False):
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = float(b[oc])
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            y, xx = i * stride + di - pad, j * stride + dj - pad
                            if 0 <= y < h and 0 <= xx < wd:
                                acc += float(x[ic, y, xx]) * float(w[oc, ic, di, dj])
                out[oc, i, j] = max(acc, 0.0) if relu else acc
    return out


def fc_ref(v, w, b):
    return np.array([float(b[o]) + sum(float(w[o, i]) * float(v[i]) for i in range(len(v))) for o in range(len(b))])


def _src_coord(i, n_in, n_out):
    return min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1.0)


def resize_ref(x, out_h, out_w):
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = _src_coord(i, h, out_h)
        y0 = int(math.floor(sy))
        y1, fy = min(y0 + 1, h - 1), sy - y0
        for j in range(out_w):
            sx = _src_coord(j, w, out_w)
            x0 = int(math.floor(sx))
            x1, fx = min(x0 + 1, w - 1), sx - x0
            for ch in range(c):
                top = x[ch, y0, x0] * (1 - fx) + x[ch, y0, x1] * fx
                bot = x[ch, y1, x0] * (1 - fx) + x[ch, y1, x1] * fx
                out[ch, i, j] = top * (1 - fy) + bot * fy
    return out


def ncc_ref(t, s):
    c, th, tw = t.shape
    _, sh, sw = s.shape
    tm = [sum(float(t[k, a, b]) for a in range(th) for b in range(tw)) / (th * tw) for k in range(c)]
    out = np.zeros((sh - th + 1, sw - tw + 1))
    for y in range(sh - th + 1):
        for x in range(sw - tw + 1):
            num = tt = ss = total = 0.0
            for k in range(c):
                sm = sum(float(s[k, y + a, x + b]) for a in range(th) for b in range(tw)) / (th * tw)
                for a in range(th):
                    for b in range(tw):
                        dt = float(t[k, a, b]) - tm[k]
                        v = float(s[k, y + a, x + b])
                        ds = v - sm
                        num += dt * ds
                        tt += dt * dt
                        ss += ds * ds
                        total += v * v
            if ss <= 1e-9 * total or tt * ss <= 0.0:
                out[y, x] = 0.0
            else:
                out[y, x] = min(1.0, max(-1.0, num / math.sqrt(tt * ss)))
    return out


def _bilinear_zero(data, ch, y, x):
    h, w = data.shape[1:]
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    acc = 0.0
    for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                acc += wy * wx * float(data[ch, yy, xx])
    return acc


def roialign_ref(data, roi, out_size, spb):
    """``roi`` is ``(x1, y1, x2, y2)`` in feature-index coordinates."""
    x1, y1, x2, y2 = roi
    bh, bw = (y2 - y1) / out_size, (x2 - x1) / out_size
    out = np.zeros((data.shape[0], out_size, out_size))
    for ch in range(data.shape[0]):
        for py in range(out_size):
            for px in range(out_size):
                acc = 0.0
                for iy in range(spb):
                    for ix in range(spb):
                        y = y1 + (py + (iy + 0.5) / spb) * bh
                        x = x1 + (px + (ix + 0.5) / spb) * bw
                        acc += _bilinear_zero(data, ch, y, x)
                out[ch, py, px] = acc / (spb * spb)
    return out


def iou_ref(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def nms_ref(xyxy, scores, thr, keep):
    """Pairwise check: a box survives iff no surviving higher-priority box overlaps it above ``thr``."""
    n = len(scores)
    prio = sorted(range(n), key=lambda i: (-scores[i], i))
    ov = [[iou_ref(xyxy[i], xyxy[j]) for j in range(n)] for i in range(n)]
    kept = []
    for i in prio:
        if all(ov[k][i] <= thr for k in kept):
            kept.append(i)
    return kept[:keep]


# -- the suite ----------------------------------------------------------------


@dataclass
class OracleResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.cases} cases, max |err| {self.max_error:.3g} (tol {self.tolerance:g}), {self.seconds:.2f}s"


def _timed(name: str, tol: float, cases: int, fn: Callable[[np.random.Generator], float], seed: int) -> OracleResult:
    rng = make_rng(seed)
    t0 = time.perf_counter()
    err = 0.0
    for _ in range(cases):
        err = max(err, fn(rng))
    return OracleResult(name, cases, err, tol, time.perf_counter() - t0)


def _case_conv(rng):
    c, o = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k, s, p = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
    x = rng.uniform(-1, 1, (c, h, w)).astype(np.float32)
    wt = rng.uniform(-1, 1, (o, c, k, k)).astype(np.float32)
    b = rng.uniform(-1, 1, o).astype(np.float32)
    relu = bool(rng.integers(0, 2))
    got = conv2d(FeatureMap(x, 1.0), DenseLayerParams("conv2d", wt, b, s, p, "relu" if relu else "none")).data
    return float(np.abs(got - conv2d_ref(x, wt, b, s, p, relu)).max())


def _case_fc(rng):
    n, m = int(rng.integers(1, 40)), int(rng.integers(1, 10))
    v = rng.uniform(-1, 1, n).astype(np.float32)
    w = rng.uniform(-1, 1, (m, n)).astype(np.float32)
    b = rng.uniform(-1, 1, m).astype(np.float32)
    got = fully_connected(v, DenseLayerParams("fc", w, b))
    return float(np.abs(got - fc_ref(v, w, b)).max())


def _case_resize(rng):
    c, h, w = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
    oh, ow = int(rng.integers(1, 13)), int(rng.integers(1, 13))
    x = rng.uniform(-1, 1, (c, h, w)).astype(np.float32)
    got = resize_bilinear(FeatureMap(x, 8.0), oh, ow).data
    return float(np.abs(got - resize_ref(x, oh, ow)).max())


def _case_xcorr(rng, backend=None):
    c = int(rng.integers(1, 4))
    th, tw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    sh, sw = th + int(rng.integers(0, 5)), tw + int(rng.integers(0, 5))
    t = rng.normal(size=(c, th, tw)).astype(np.float32)
    s = rng.normal(size=(c, sh, sw)).astype(np.float32)
    if backend is None:
        got = xcorr(FeatureMap(t, 16.0), FeatureMap(s, 16.0)).data[0]
        return float(np.abs(got - (ncc_ref(t, s) + 1.0) / 2.0).max())
    return float(np.abs(kernels.get_backend(backend).ncc(t, s) - ncc_ref(t, s)).max())


def _roi_case(rng, backend):
    c, h, w = int(rng.integers(1, 4)), int(rng.integers(2, 10)), int(rng.integers(2, 10))
    data = rng.uniform(-1, 1, (c, h, w)).astype(np.float32)
    x1, y1 = rng.uniform(-2, w), rng.uniform(-2, h)
    roi = np.array([[x1, y1, x1 + rng.uniform(0.1, 6), y1 + rng.uniform(0.1, 6)]])
    size, spb = int(rng.integers(1, 7)), int(rng.integers(1, 3))
    got = kernels.get_backend(backend).roialign(data, roi, size, spb)[0]
    return float(np.abs(got - roialign_ref(data, roi[0], size, spb)).max())


def _case_nms(rng):
    n = int(rng.integers(0, 21))
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(1, 30, (n, 2))
    xyxy = np.column_stack([xy, xy + wh])
    # coarse scores produce plenty of exact ties
    scores = np.round(rng.uniform(0, 1, n), 1)
    thr = float(rng.choice([0.0, 0.3, 0.5, 0.7, 1.0]))
    keep = int(rng.integers(1, 25))
    cxcy = np.column_stack([(xyxy[:, :2] + xyxy[:, 2:]) / 2, wh])
    got = nms(cxcy, scores, thr, keep)
    return 0.0 if got == nms_ref(xyxy.tolist(), scores.tolist(), thr, keep) else 1.0


def _case_offsets(rng):
    n = 10_000
    p = np.column_stack([rng.uniform(-500, 500, (n, 2)), rng.uniform(1, 300, (n, 2))])
    g = np.column_stack([rng.uniform(-500, 500, (n, 2)), rng.uniform(1, 300, (n, 2))])
    back = decode_offsets_array(p, encode_offsets_array(p, g))
    return float(np.abs(back - g).max())


def _case_cg(rng):
    d = int(rng.integers(1, 65))
    m = int(rng.integers(1, 2 * d + 2))
    a = rng.normal(size=(m, d))
    y = rng.normal(size=m)
    lam = float(10 ** rng.uniform(-2, 1))
    res = solve_ridge(a, y, lam, tol=1e-12, max_iters=10 * d)
    ref = np.linalg.solve(a.T @ a + lam * np.eye(d), a.T @ y)
    return float(np.linalg.norm(res.x - ref) / max(np.linalg.norm(ref), 1e-300))


def run_all(seed: int = 0) -> list[OracleResult]:
    out = [
        _timed("conv2d", 1e-6, 100, _case_conv, seed),
        _timed("fully_connected", 1e-6, 100, _case_fc, seed + 1),
        _timed("resize_bilinear", 1e-6, 100, _case_resize, seed + 2),
        _timed("xcorr", 1e-5, 100, _case_xcorr, seed + 3),
    ]
    for name in sorted(kernels.available_backends()):
        out.append(_timed(f"ncc[{name}]", 1e-5, 100, lambda r, n=name: _case_xcorr(r, n), seed + 3))
        out.append(_timed(f"roialign[{name}]", 1e-6, 100, lambda r, n=name: _roi_case(r, n), seed + 4))
    out.append(_timed("nms", 0.0, 1000, _case_nms, seed + 5))
    out.append(_timed("offset round trip (1e4 boxes)", 1e-9, 1, _case_offsets, seed + 6))
    out.append(_timed("conjugate gradient vs dense ridge", 1e-5, 200, _case_cg, seed + 7))
    return out


def roialign_case_for_box(data: np.ndarray, box: Box, stride: float, out_size: int, spb: int = 2):
    """Pool one image-space box with both the library and the reference; returns the pair."""
    fm = FeatureMap(data, stride)
    got = roialign_batch(fm, box.as_array()[None], out_size, spb)[0]
    x1, y1, x2, y2 = box.to_xyxy()
    ref = roialign_ref(fm.data, (x1 / stride - 0.5, y1 / stride - 0.5, x2 / stride - 0.5, y2 / stride - 0.5), out_size, spb)
    return got, ref
