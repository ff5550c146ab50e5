"""Frame-by-frame tracking: coarse proposals, cascaded refinement, selection, online updates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneParams, CropTransform, ImagePatch, crop_region, fused_features
from .config import Config
from .crac import (
    DiscriminatorModel,
    IdentifierModel,
    MemoryEntry,
    SampleMemory,
    TrainStats,
    box_regress_batch,
    discriminate_batch,
    fuse_scores,
    identify_batch,
    hard_negative_indices,
    ridge_objective,
    train_discriminator,
)
from .geometry import AnchorSpec, Box, anchors_array, array_to_boxes, boxes_to_array, decode_offsets_array, iou_many
from .models import ModelBundle, load_models
from .proposal import Proposal, RpnHeads, extract_proposals
from .roipool import PooledFeature, PyramidParams, pool_boxes
from .tensor import FeatureMap, make_rng

MIN_BOX_SIDE = 4.0


@dataclass(frozen=True)
class ScoreSet:
    coarse: np.ndarray  # c_i
    nu: np.ndarray  # (N, 2) identifier probabilities, positive class first
    nu_pos: np.ndarray
    tau: np.ndarray
    fused: np.ndarray

    def __post_init__(self):
        for name in ("nu_pos", "tau", "fused", "coarse"):
            v = getattr(self, name)
            if v.size and (v.min() < 0.0 or v.max() > 1.0):
                raise ValueError(f"{name} scores must lie in [0, 1]")


@dataclass
class FrameRecord:
    frame: int
    box: Box
    proposals: list[Proposal]
    refined: list[Box]
    scores: ScoreSet | None
    selected: int
    fallback: bool = False
    updated: bool = False


@dataclass
class Pipeline:
    """Everything fixed for a run: config, offline weights, backbone, anchors."""

    cfg: Config
    bundle: ModelBundle
    backbone: BackboneParams
    pyramid: PyramidParams | None
    identifier: IdentifierModel
    rpn: RpnHeads
    anchors: np.ndarray

    @classmethod
    def build(cls, cfg: Config, bundle: ModelBundle | None = None, rpn: RpnHeads | None = None) -> "Pipeline":
        if bundle is None:
            bundle = load_models(cfg.pooling, cfg.weights)
        if bundle.pooling != cfg.pooling:
            raise ValueError(f"weights are for {bundle.pooling} pooling but the config asks for {cfg.pooling}")
        pyramid = PyramidParams(cfg.pyramid_levels, bundle.fusion) if cfg.pooling == "proialign" else None
        ident = bundle.identifier
        if cfg.identifier_mode != ident.score_mode:
            ident = IdentifierModel(ident.conv, ident.fcs, score_mode=cfg.identifier_mode)
        if rpn is None:
            rpn = bundle.meta.get("_rpn") if cfg.rpn_mode == "trained" else RpnHeads()
            if rpn is None:
                raise ValueError("trained RPN mode needs fitted heads")
        grid = cfg.search_size // 16
        spec = AnchorSpec(cfg.anchor_ratios, cfg.anchor_scales, 16.0)
        return cls(cfg, bundle, BackboneParams(), pyramid, ident, rpn, anchors_array(spec, grid, grid))

    def features(self, frame: ImagePatch, box: Box, context: float, size: int) -> tuple[FeatureMap, CropTransform]:
        patch, tf = crop_region(frame, box, context, size)
        return fused_features(patch, self.backbone), tf

    def cell_centered(self, frame: ImagePatch, box: Box, context: float, size: int) -> tuple[FeatureMap, CropTransform]:
        """Features of a crop shifted by half a cell so the center of ``box`` lands on a cell center.

        An unshifted crop puts the box center on a cell corner, the worst case
        for a correlation sampled once per cell.
        """
        shift = 8.0 * context * math.sqrt(box.w * box.h) / size
        return self.features(frame, Box(box.cx + shift, box.cy + shift, box.w, box.h), context, size)

    def template_map(self, frame: ImagePatch, box: Box) -> tuple[FeatureMap, CropTransform]:
        return self.cell_centered(frame, box, self.cfg.template_context, self.cfg.template_size)

    def template(self, frame: ImagePatch, box: Box):
        fz, tz = self.template_map(frame, box)
        bz = tz.box_to_patch(box)
        return fz, target_kernel(fz, bz), self.pool(fz, [bz])[0]

    def search(self, frame: ImagePatch, box: Box) -> tuple[FeatureMap, CropTransform]:
        return self.cell_centered(frame, box, self.cfg.search_context, self.cfg.search_size)

    def pool(self, fmap: FeatureMap, boxes) -> list[PooledFeature]:
        return pool_boxes(fmap, boxes, self.pyramid)

    def pool_array(self, fmap: FeatureMap, boxes: np.ndarray) -> np.ndarray:
        if len(boxes) == 0:
            return np.zeros((0, fmap.channels, 6, 6), dtype=np.float32)
        return np.stack([p.data for p in self.pool(fmap, boxes)])


def target_kernel(fz: FeatureMap, box_in_patch: Box) -> FeatureMap:
    """Odd-sided block of template cells centered on the cell holding the box center.

    The half-width per axis is the smallest that covers the box, limited so the
    block stays symmetric inside the map.
    """
    s = fz.stride
    ci = int(np.clip(box_in_patch.cy // s, 0, fz.height - 1))
    cj = int(np.clip(box_in_patch.cx // s, 0, fz.width - 1))
    hy = min(max(0, math.ceil((box_in_patch.h / s - 1) / 2)), ci, fz.height - 1 - ci)
    hx = min(max(0, math.ceil((box_in_patch.w / s - 1) / 2)), cj, fz.width - 1 - cj)
    return FeatureMap(fz.data[:, ci - hy : ci + hy + 1, cj - hx : cj + hx + 1], s)


def clamp_box(box: Box, width: float, height: float) -> Box:
    """Clip ``box`` to the canvas; raises when nothing of it is left."""
    x1, y1, x2, y2 = box.to_xyxy()
    x1, x2 = max(0.0, x1), min(float(width), x2)
    y1, y2 = max(0.0, y1), min(float(height), y2)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise ValueError(f"box {box} lies outside the {width}x{height} image")
    return Box.from_xyxy(x1, y1, x2, y2)


def displacement_prior(boxes: np.ndarray, size: int) -> np.ndarray:
    """Separable Hann window over the search patch, evaluated at each box center (1 at the middle)."""
    c = np.clip(np.asarray(boxes, dtype=np.float64)[:, :2] / size, 0.0, 1.0)
    return np.prod(0.5 - 0.5 * np.cos(2.0 * np.pi * c), axis=1)


def select_best(coarse, fused, beta: float, prior=None, influence: float = 0.0) -> int:
    """Index maximizing ``beta * fused + (1 - beta) * coarse``; the lower index wins ties.

    With ``influence > 0`` the score is blended with ``prior`` (one value per
    proposal): ``(1 - influence) * score + influence * prior``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    coarse = np.asarray(coarse, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    if len(coarse) == 0 or len(coarse) != len(fused):
        raise ValueError("need equally many non-zero coarse and fused scores")
    score = beta * fused + (1.0 - beta) * coarse
    if influence > 0.0:
        score = (1.0 - influence) * score + influence * np.asarray(prior, dtype=np.float64)
    return int(np.argmax(score))


def sample_boxes(
    rng: np.random.Generator,
    box: Box,
    n: int,
    sigma_center: float,
    sigma_scale: float,
    iou_lo: float,
    iou_hi: float,
    bounds: tuple[float, float, float, float],
    max_rounds: int = 50,
) -> np.ndarray:
    """``n`` Gaussian jitters of ``box`` with IoU strictly inside ``(iou_lo, iou_hi)``.

    Centers are kept within ``bounds = (x1, y1, x2, y2)``. Rejection sampling in
    batches; the spread adapts when a round yields too few boxes.
    """
    if n == 0:
        return np.zeros((0, 4))
    out = []
    got = 0
    sc, ss = sigma_center, sigma_scale
    for _ in range(max_rounds):
        m = max(4 * (n - got), 16)
        d = rng.normal(size=(m, 4))
        c = np.column_stack([box.cx + d[:, 0] * sc * box.w, box.cy + d[:, 1] * sc * box.h])
        wh = np.column_stack([box.w * np.exp(d[:, 2] * ss), box.h * np.exp(d[:, 3] * ss)])
        cand = np.column_stack([c, wh])
        x1, y1, x2, y2 = bounds
        ok = (cand[:, 0] >= x1) & (cand[:, 0] <= x2) & (cand[:, 1] >= y1) & (cand[:, 1] <= y2)
        ov = iou_many(box, cand)
        ok &= (ov > iou_lo) & (ov < iou_hi) & (cand[:, 2] >= MIN_BOX_SIDE) & (cand[:, 3] >= MIN_BOX_SIDE)
        take = cand[ok][: n - got]
        out.append(take)
        got += len(take)
        if got == n:
            return np.concatenate(out)
        if len(take) < m // 20:
            if iou_hi >= 1.0:
                sc, ss = sc * 0.8, ss * 0.8
            else:
                sc *= 1.3
    raise RuntimeError(f"could only draw {got} of {n} samples around {box}")


@dataclass
class TrackerState:
    pipe: Pipeline
    template: FeatureMap
    kernel: FeatureMap
    f_init: PooledFeature
    discriminator: DiscriminatorModel
    memory: SampleMemory
    box: Box
    image_size: tuple[int, int]
    rng: np.random.Generator
    t: int = 0
    since_update: int = 0
    cycle: int = 0
    updates: int = 0
    log: list[FrameRecord] = field(default_factory=list)
    train_log: list[TrainStats] = field(default_factory=list)

    @property
    def cfg(self) -> Config:
        return self.pipe.cfg


def _patch_bounds(size: int) -> tuple[float, float, float, float]:
    return (0.0, 0.0, float(size), float(size))


def draw_training_boxes(rng, cfg: Config, box_patch: Box, n_pos: int, n_neg: int) -> tuple[np.ndarray, np.ndarray]:
    bounds = _patch_bounds(cfg.search_size)
    pos = sample_boxes(rng, box_patch, n_pos, cfg.pos_sigma_center, cfg.pos_sigma_scale, cfg.refine_iou_thr, 1.01, bounds)
    neg = sample_boxes(rng, box_patch, n_neg, cfg.neg_sigma_center, cfg.neg_sigma_scale, -1.0, cfg.sample_neg_thr, bounds)
    return pos, neg


def _entries(feats: np.ndarray, label: float, frame: int, origin: str, cycle: int) -> list[MemoryEntry]:
    return [MemoryEntry(f, label, frame, origin, cycle) for f in feats]


def _hard_negative_boxes(rng, cfg: Config, picked: list[Box], gt: Box, quota: int) -> np.ndarray:
    """Mined distractor boxes plus small jitters of them, up to ``quota`` boxes with IoU < threshold vs ``gt``."""
    if not picked or quota == 0:
        return np.zeros((0, 4))
    out = [b.as_array() for b in picked][:quota]
    bounds = _patch_bounds(cfg.search_size)
    k = 0
    tries = 0
    while len(out) < quota and tries < 20 * quota:
        src = picked[k % len(picked)]
        k += 1
        tries += 1
        d = rng.normal(size=4)
        cand = np.array([
            src.cx + 0.05 * src.w * d[0],
            src.cy + 0.05 * src.h * d[1],
            src.w * math.exp(0.05 * d[2]),
            src.h * math.exp(0.05 * d[3]),
        ])
        x1, y1, x2, y2 = bounds
        if not (x1 <= cand[0] <= x2 and y1 <= cand[1] <= y2):
            continue
        if iou_many(gt, cand[None])[0] < cfg.sample_neg_thr:
            out.append(cand)
    return np.array(out).reshape(-1, 4)


def collect_samples(state: TrackerState, box_patch: Box, fmap: FeatureMap, candidates, scores, n_pos: int, n_neg: int, origin: str = "tracked") -> list[MemoryEntry]:
    """Positives and negatives around ``box_patch``; mined hard negatives come first in the negative quota.

    The hard share of the negatives is ``hard_neg_quota / n_neg``, so larger
    initial draws mine proportionally more.
    """
    cfg = state.cfg
    rng = state.rng
    hard_quota = min(n_neg, round(cfg.hard_neg_quota * n_neg / cfg.n_neg))
    boxes = [b for _, b in candidates]
    picked = hard_negative_indices(boxes, scores, box_patch, len(boxes), cfg.sample_neg_thr)
    mined_boxes = [boxes[i] for i in picked]
    hard_boxes = _hard_negative_boxes(rng, cfg, mined_boxes, box_patch, hard_quota)
    pos, neg = draw_training_boxes(rng, cfg, box_patch, n_pos, n_neg - len(hard_boxes))
    feats = state.pipe.pool_array(fmap, np.concatenate([pos, hard_boxes, neg]))
    hard_origin = "initial" if origin == "initial" else "hard-negative"
    return (
        _entries(feats[: len(pos)], 1.0, state.t, origin, state.cycle)
        + _entries(feats[len(pos) : len(pos) + len(hard_boxes)], 0.0, state.t, hard_origin, state.cycle)
        + _entries(feats[len(pos) + len(hard_boxes) :], 0.0, state.t, origin, state.cycle)
    )


def init(frame: ImagePatch, b1: Box, cfg: Config | None = None, models: ModelBundle | Pipeline | None = None) -> TrackerState:
    cfg = cfg or Config()
    pipe = models if isinstance(models, Pipeline) else Pipeline.build(cfg, models)
    if pipe.cfg != cfg:
        raise ValueError("pipeline was built for a different config")
    b1 = clamp_box(b1, frame.width, frame.height)
    if b1.w < 1.0 or b1.h < 1.0:
        raise ValueError(f"initial box {b1} is too small")
    fz, kernel, f_init = pipe.template(frame, b1)
    rng = make_rng(cfg.seed)
    c = fz.channels
    disc = DiscriminatorModel.init(c, cfg.pyramid_levels[0] ** 2 if cfg.pooling == "proialign" else 36, seed=cfg.seed + 1, lam=cfg.lam)
    capacity = cfg.init_pos + cfg.init_neg + cfg.memory_cycles * (cfg.n_pos + cfg.n_neg)
    state = TrackerState(pipe, fz, kernel, f_init, disc, SampleMemory(capacity), b1, (frame.width, frame.height), rng)
    fx, tx = pipe.search(frame, b1)
    bx = tx.box_to_patch(b1)
    props = extract_proposals(kernel, fx, pipe.anchors, pipe.rpn, cfg.N, cfg.nms_thr)
    cands, cand_scores = [], []
    if props:
        # mine both the raw proposals and their regressed boxes, as later frames see the latter
        raw = boxes_to_array([p.box for p in props])
        reg = decode_offsets_array(raw, box_regress_batch(pipe.pool_array(fx, raw), f_init, pipe.bundle.regressor))
        reg[:, 2:] = np.clip(reg[:, 2:], MIN_BOX_SIDE, 4.0 * cfg.search_size)
        both = np.concatenate([reg, raw])
        cands = list(zip(pipe.pool(fx, both), array_to_boxes(both)))
        cand_scores = [p.coarse_score for p in props] * 2
    entries = collect_samples(state, bx, fx, cands, cand_scores, cfg.init_pos, cfg.init_neg, origin="initial")
    state.memory.add(entries)
    state.discriminator, stats = train_discriminator(
        disc, state.memory, cfg.lam, cfg.cg_max_iters, cfg.cg_tol, return_stats=True
    )
    state.train_log.append(stats)
    return state


def refine(state: TrackerState, fx: FeatureMap, props: list[Proposal]):
    """Regress, align and classify every proposal; returns refined boxes, their features and scores."""
    cfg, pipe = state.cfg, state.pipe
    boxes = boxes_to_array([p.box for p in props])
    f = pipe.pool_array(fx, boxes)
    offs = box_regress_batch(f, state.f_init, pipe.bundle.regressor)
    refined = decode_offsets_array(boxes, offs)
    refined[:, 2:] = np.clip(refined[:, 2:], MIN_BOX_SIDE, 4.0 * cfg.search_size)
    # the cascade classifies features pooled at the regressed box; the parallel arm reuses the proposal pool
    f_cls = pipe.pool_array(fx, refined) if cfg.refinement == "cascade" else f
    nu = identify_batch(f_cls, state.f_init, pipe.identifier)
    tau = discriminate_batch(f_cls, state.discriminator)
    nu_pos = np.clip(nu[:, 0], 0.0, 1.0)
    fused = np.clip(fuse_scores(nu_pos, tau, cfg.fusion_alpha), 0.0, 1.0)
    coarse = np.array([p.coarse_score for p in props])
    return refined, f_cls, ScoreSet(coarse, nu, nu_pos, tau, np.atleast_1d(fused))


def _bounded_center(v: float, lo1: float, hi1: float, lo2: float, hi2: float) -> float:
    return float(np.clip(v, max(lo1, lo2), min(hi1, hi2)))


def track_frame(state: TrackerState, frame: ImagePatch) -> Box:
    cfg, pipe = state.cfg, state.pipe
    state.t += 1
    prev = state.box
    fx, tx = pipe.search(frame, prev)
    props = extract_proposals(state.kernel, fx, pipe.anchors, pipe.rpn, cfg.N, cfg.nms_thr)
    if not props:
        state.log.append(FrameRecord(state.t, prev, [], [], None, -1, fallback=True))
        state.since_update += 1
        return prev
    refined, f_cls, scores = refine(state, fx, props)
    idx = select_best(scores.coarse, scores.fused, cfg.beta, displacement_prior(refined, cfg.search_size), cfg.window_influence)
    win = tx.box_to_image(Box(*refined[idx]))
    d = cfg.scale_damping
    w = (1 - d) * prev.w + d * win.w
    h = (1 - d) * prev.h + d * win.h
    # stay inside both the search region and the image
    half = cfg.search_size / tx.scale / 2.0
    scx, scy = tx.origin_x + half, tx.origin_y + half
    cx = _bounded_center(win.cx, scx - half, scx + half, 0.0, float(frame.width))
    cy = _bounded_center(win.cy, scy - half, scy + half, 0.0, float(frame.height))
    w = float(np.clip(w, MIN_BOX_SIDE, frame.width))
    h = float(np.clip(h, MIN_BOX_SIDE, frame.height))
    state.box = Box(cx, cy, w, h)
    record = FrameRecord(state.t, state.box, props, array_to_boxes(refined), scores, idx)
    state.log.append(record)
    state.since_update += 1
    if state.since_update >= cfg.K:
        bx = tx.box_to_patch(state.box)
        cands = [(f, b) for f, b in zip(pipe.pool(fx, refined), array_to_boxes(refined))]
        delta = collect_samples(state, bx, fx, cands, scores.fused, cfg.n_pos, cfg.n_neg)
        state.memory.add(delta)
        maybe_update(state)
        record.updated = True
    return state.box


def maybe_update(state: TrackerState) -> bool:
    """Retrain the discriminator every ``K`` frames on initial samples plus the recent cycles."""
    cfg = state.cfg
    if state.since_update < cfg.K:
        return False
    train_set = state.memory.select(min_cycle=state.cycle - cfg.short_cycles + 1)
    state.discriminator, stats = train_discriminator(
        state.discriminator, train_set, cfg.lam, cfg.cg_max_iters, cfg.cg_tol, return_stats=True
    )
    state.train_log.append(stats)
    state.since_update = 0
    state.cycle += 1
    state.updates += 1
    return True


def track_sequence(frames, b1: Box, cfg: Config | None = None, models=None) -> tuple[list[Box], TrackerState]:
    """Boxes for every frame; the first entry is ``b1`` itself."""
    state = init(frames[0], b1, cfg, models)
    out = [state.box]
    for frame in frames[1:]:
        out.append(track_frame(state, frame))
    return out, state


def objective_of(state: TrackerState) -> float:
    return ridge_objective(state.memory, state.discriminator)
