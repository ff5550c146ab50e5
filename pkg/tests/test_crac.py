import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadetrack.crac import (
    DiscriminatorModel,
    IdentifierModel,
    MemoryEntry,
    RegressorModel,
    SampleMemory,
    align_proposal,
    box_regress,
    box_regress_batch,
    discriminate,
    discriminate_batch,
    fuse_scores,
    hard_negative_indices,
    ide_loss,
    ide_loss_grad,
    identify,
    identify_batch,
    mine_hard_negatives,
    reg_loss,
    reg_loss_grad,
    ridge_objective,
    ridge_objective_grad,
    train_discriminator,
)
from cascadetrack.geometry import Box, OffsetVector, encode_offsets, iou
from cascadetrack.roipool import PooledFeature, PyramidParams, pool_boxes
from cascadetrack.solver import solve_ridge
from cascadetrack.tensor import FeatureMap, ShapeError

C = 8


def _feat(rng, n, c=C):
    return rng.normal(0, 1, (n, c, 6, 6))


def _pooled(rng, c=C):
    return PooledFeature(rng.normal(0, 1, (c, 6, 6)).astype(np.float32), Box(10, 10, 8, 8), "pyramid-fused")


def _memory(rng, n_pos=6, n_neg=12, shift=1.0):
    pos = _feat(rng, n_pos) + shift
    neg = _feat(rng, n_neg) - shift
    entries = [MemoryEntry(x.astype(np.float32), 1.0, 0, "initial") for x in pos]
    entries += [MemoryEntry(x.astype(np.float32), 0.0, 0, "initial") for x in neg]
    mem = SampleMemory(64)
    mem.add(entries)
    return mem


# -- regression ---------------------------------------------------------------


def test_zero_last_layer_regressor_outputs_zero(rng):
    model = RegressorModel.init(C, zero_last=True)
    for _ in range(5):
        r = box_regress(_pooled(rng), _pooled(rng), model)
        assert r.as_array().tolist() == [0.0, 0.0, 0.0, 0.0]


def test_regressor_clamps_large_input(rng):
    model = RegressorModel.init(C, seed=2)
    x = np.full((3, C, 6, 6), 1e30)
    r = box_regress_batch(x, np.full((C, 6, 6), 1e30), model)
    assert np.isfinite(r).all()
    assert np.abs(r[:, 2:]).max() <= math.log(1000.0)


def test_regressor_shape_mismatch(rng):
    model = RegressorModel.init(C)
    small = PooledFeature(np.zeros((C, 3, 3), np.float32), Box(1, 1, 1, 1))
    with pytest.raises(ShapeError):
        box_regress(_pooled(rng), small, model)
    with pytest.raises(ShapeError):
        RegressorModel.from_head(IdentifierModel.init(C).head)


def test_align_with_zero_offsets_is_identity(rng):
    fmap = FeatureMap(rng.uniform(-1, 1, (C, 16, 16)).astype(np.float32), 16.0)
    p = Box(120, 100, 60, 40)
    refined, f = align_proposal(p, OffsetVector.zero(), fmap, PyramidParams())
    assert refined == p
    assert np.array_equal(f.data, pool_boxes(fmap, [p], PyramidParams())[0].data)


def test_align_with_exact_offset_pools_at_truth(rng):
    fmap = FeatureMap(rng.uniform(-1, 1, (C, 16, 16)).astype(np.float32), 16.0)
    p = Box(100, 120, 64, 48)
    truth = Box(p.cx + p.w / 2, p.cy, p.w, p.h)
    refined, f = align_proposal(p, encode_offsets(p, truth), fmap, None)
    assert np.abs(refined.as_array() - truth.as_array()).max() <= 1e-9
    assert np.array_equal(f.data, pool_boxes(fmap, [truth], None)[0].data)


def test_oracle_offset_improves_iou_on_random_jitters(rng):
    fmap = FeatureMap(np.zeros((C, 16, 16), np.float32), 16.0)
    for _ in range(100):
        truth = Box(rng.uniform(60, 200), rng.uniform(60, 200), rng.uniform(20, 90), rng.uniform(20, 90))
        p = Box(truth.cx + rng.normal(0, 10), truth.cy + rng.normal(0, 10), truth.w * rng.uniform(0.7, 1.4), truth.h * rng.uniform(0.7, 1.4))
        refined, _ = align_proposal(p, encode_offsets(p, truth), fmap, None)
        assert iou(refined, truth) > iou(p, truth) or iou(p, truth) == pytest.approx(1.0)


# -- identification -----------------------------------------------------------


def test_cosine_fallback_extremes(rng):
    model = IdentifierModel.init(C, score_mode="cosine-fallback")
    f = _pooled(rng)
    nu, pos = identify(f, f, model)
    assert pos == pytest.approx(1.0, abs=1e-7) and nu[1] == pytest.approx(0.0, abs=1e-7)
    neg = PooledFeature(-f.data, f.box, f.kind)
    assert identify(neg, f, model)[1] == pytest.approx(0.0, abs=1e-7)
    zero = PooledFeature(np.zeros_like(f.data), f.box, f.kind)
    assert identify(zero, f, model)[1] == pytest.approx(0.5)


def test_softmax_rows_sum_to_one(rng):
    model = IdentifierModel.init(C, seed=4)
    probs = identify_batch(_feat(rng, 20), _feat(rng, 1)[0], model)
    assert probs.shape == (20, 2)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert (probs >= 0).all() and (probs <= 1).all()


def test_identifier_mode_validation():
    with pytest.raises(ValueError):
        IdentifierModel.init(C, score_mode="dot")


# -- discriminator ------------------------------------------------------------


def test_zero_fc_discriminates_to_zero(rng):
    base = DiscriminatorModel.init(C)
    w1 = np.zeros_like(base.fcs[0].weights)
    model = base.with_fc(w1, np.zeros(64), np.zeros(64), np.zeros(1))
    assert discriminate(_pooled(rng), model) == 0.0
    assert discriminate_batch(np.zeros((0, C, 6, 6)), model).shape == (0,)


def test_discriminator_validation():
    base = DiscriminatorModel.init(C)
    with pytest.raises(ValueError):
        DiscriminatorModel(base.conv, base.fcs, lam=0.0)
    w1 = base.fcs[0].weights.copy()
    w1[0, 0] = np.nan
    with pytest.raises(ValueError):
        base.with_fc(w1, base.fcs[0].bias, base.fcs[1].weights, base.fcs[1].bias)


def test_objective_zero_weights_all_ones_equals_count(rng):
    mem = SampleMemory(32)
    mem.add([MemoryEntry(x.astype(np.float32), 1.0, 0, "tracked") for x in _feat(rng, 7)])
    model = DiscriminatorModel.init(C)
    model = model.with_fc(np.zeros_like(model.fcs[0].weights), np.zeros(64), np.zeros(64), np.zeros(1))
    assert ridge_objective(mem, model) == pytest.approx(7.0)


def test_objective_zero_at_exact_fit(rng):
    x = _feat(rng, 5)
    model = DiscriminatorModel.init(C, seed=1)
    model = model.with_fc(model.fcs[0].weights, model.fcs[0].bias, np.zeros(64), np.array([1.0]))
    assert ridge_objective((x, np.ones(5)), model, lam=0.0) == pytest.approx(0.0, abs=1e-12)


def test_objective_gradient_matches_finite_differences(rng):
    mem = _memory(rng, 4, 6)
    base = DiscriminatorModel.init(C, seed=3, lam=0.3)
    r = np.random.Generator(np.random.PCG64(8))
    w1 = base.fcs[0].weights.astype(np.float64)
    b1 = r.normal(0, 0.1, 64)
    w2 = r.normal(0, 0.2, 64)
    b2 = np.array([0.1])
    model = base.with_fc(w1, b1, w2, b2)
    _, grad = ridge_objective_grad(mem, model)
    vec = model.weight_vector()
    sizes = [w1.size, 64, 64, 1]
    cuts = np.cumsum(sizes)[:-1]

    def at(v):
        a, b, c, d = np.split(v, cuts)
        return ridge_objective(mem, base.with_fc(a.reshape(w1.shape), b, c, d))

    # weights are stored in float32, so measure the step after rounding
    eps = 1e-4
    idx = np.concatenate([r.choice(w1.size, 60, replace=False), np.arange(w1.size, vec.size)])
    for i in idx:
        hi, lo = vec.copy(), vec.copy()
        hi[i] = np.float32(vec[i] + eps)
        lo[i] = np.float32(vec[i] - eps)
        fd = (at(hi) - at(lo)) / (hi[i] - lo[i])
        assert abs(fd - grad[i]) <= 1e-4 * max(1.0, abs(fd), abs(grad[i])), (i, fd, grad[i])


def test_training_never_raises_objective(rng):
    for seed in range(5):
        r = np.random.Generator(np.random.PCG64(seed))
        mem = _memory(r, 5, 15, shift=0.3)
        model = DiscriminatorModel.init(C, seed=seed)
        for _ in range(3):
            new, stats = train_discriminator(model, mem, return_stats=True)
            assert ridge_objective(mem, new) <= ridge_objective(mem, model) + 1e-9
            assert stats.objective_after == pytest.approx(ridge_objective(mem, new), rel=1e-9)
            model = new


def test_training_separates_classes(rng):
    mem = _memory(rng, 10, 30, shift=0.5)
    model = train_discriminator(DiscriminatorModel.init(C), mem)
    x, y = SampleMemory.arrays(mem.entries)
    tau = discriminate_batch(x, model)
    assert tau[y == 1].mean() > tau[y == 0].mean() + 0.5


def test_heavy_regularization_approaches_label_mean(rng):
    pos = _feat(rng, 200) + 0.5
    neg = _feat(rng, 1000) - 0.5
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(200), np.zeros(1000)])
    model = train_discriminator(DiscriminatorModel.init(C, lam=1e9), (x, y))
    tau = discriminate_batch(x, model)
    assert np.abs(tau - 1 / 6).max() <= 1e-3


def test_training_rejects_non_finite(rng):
    x = _feat(rng, 3)
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        train_discriminator(DiscriminatorModel.init(C), (x, np.ones(3)))


def test_feature_scale_does_not_change_ranking(rng):
    mem = _memory(rng, 6, 12, shift=0.4)
    x, y = SampleMemory.arrays(mem.entries)
    cands = _feat(rng, 25) * 0.7
    base = DiscriminatorModel.init(C, seed=6)
    ranks = []
    for k in (1.0, 0.01, 37.0):
        model = train_discriminator(base, (x * k, y))
        ranks.append(np.argsort(-discriminate_batch(cands, model), kind="stable").tolist())
    assert ranks[0] == ranks[1] == ranks[2]


# -- solver -------------------------------------------------------------------


def test_ridge_closed_form_identity():
    res = solve_ridge(np.eye(2), np.array([1.0, 0.0]), 1.0)
    assert res.x == pytest.approx([0.5, 0.0])


def test_ridge_interpolates_without_penalty(rng):
    a = rng.normal(0, 1, (6, 6)) + 3 * np.eye(6)
    y = rng.normal(0, 1, 6)
    res = solve_ridge(a, y, 0.0, tol=1e-12, max_iters=200)
    assert np.linalg.norm(a @ res.x - y) <= 1e-6


# -- memory -------------------------------------------------------------------


def test_memory_entry_validation():
    with pytest.raises(ValueError):
        MemoryEntry(np.zeros((1, 6, 6)), 0.5, 0, "tracked")
    with pytest.raises(ValueError):
        MemoryEntry(np.zeros((1, 6, 6)), 1.0, 0, "imagined")


def test_memory_evicts_oldest_non_initial():
    z = np.zeros((1, 6, 6), np.float32)
    mem = SampleMemory(4)
    mem.add([MemoryEntry(z, 1.0, 0, "initial"), MemoryEntry(z, 0.0, 0, "initial")])
    mem.add([MemoryEntry(z, 1.0, f, "tracked", cycle=f) for f in range(1, 5)])
    assert len(mem) == 4 and mem.evicted == 2
    assert [e.frame for e in mem.entries] == [0, 0, 3, 4]
    assert [e.frame for e in mem.select(min_cycle=4)] == [0, 0, 4]
    with pytest.raises(ValueError):
        mem.add([MemoryEntry(z, 1.0, 0, "initial")] * 3)
    with pytest.raises(ValueError):
        SampleMemory.arrays([])


# -- hard negatives -----------------------------------------------------------


def test_hard_negatives_none_eligible(rng):
    gt = Box(50, 50, 20, 20)
    cands = [(_pooled(rng), Box(50 + d, 50, 20, 20)) for d in (0, 1, 2)]
    assert mine_hard_negatives(cands, [0.9, 0.8, 0.7], gt, 5) == []


def test_hard_negatives_top_quota_descending(rng):
    gt = Box(0, 0, 10, 10)
    boxes = [Box(100 + 30 * i, 100, 10, 10) for i in range(10)]
    scores = rng.permutation(10) / 10.0
    picked = hard_negative_indices(boxes, scores, gt, 3)
    assert picked == list(np.argsort(-scores)[:3])
    cands = [(_pooled(rng), b) for b in boxes]
    entries = mine_hard_negatives(cands, scores, gt, 3, frame=7, cycle=2)
    assert [e.label for e in entries] == [0.0] * 3
    assert {e.origin for e in entries} == {"hard-negative"} and entries[0].frame == 7
    with pytest.raises(ValueError):
        hard_negative_indices(boxes, scores, gt, -1)


def test_distractor_is_mined_before_background(rng):
    gt = Box(128, 128, 64, 64)
    target = _pooled(rng)
    distractor = PooledFeature(target.data + 0.05 * rng.normal(0, 1, target.data.shape).astype(np.float32), Box(40, 40, 64, 64))
    background = [_pooled(rng) for _ in range(6)]
    cands = [(target, gt), (distractor, Box(40, 40, 64, 64))] + [(f, Box(220, 20 + 30 * i, 64, 64)) for i, f in enumerate(background)]
    ide = IdentifierModel.init(C, score_mode="cosine-fallback")
    scores = identify_batch([c[0] for c in cands], target, ide)[:, 0]
    entries = mine_hard_negatives(cands, scores, gt, 1)
    assert np.array_equal(entries[0].feature, distractor.data)


# -- fusion and losses --------------------------------------------------------


def test_fuse_scores_values():
    assert fuse_scores(1.0, 0.0, 0.4) == pytest.approx(0.4)
    nu, tau = np.array([0.2, 0.9]), np.array([0.7, 0.1])
    assert np.array_equal(fuse_scores(nu, tau, 1.0), nu)
    assert np.array_equal(fuse_scores(nu, tau, 0.0), tau)
    with pytest.raises(ValueError):
        fuse_scores(nu, tau, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 0.5))
def test_fuse_scores_monotone_and_bounded(nu, tau, alpha, d):
    s = fuse_scores(nu, tau, alpha)
    assert 0.0 <= s <= 1.0
    assert fuse_scores(min(nu + d, 1.0), tau, alpha) >= s - 1e-12
    assert fuse_scores(nu, min(tau + d, 1.0), alpha) >= s - 1e-12


def test_loss_values():
    assert ide_loss([0.0, 0.0], 0) == pytest.approx(math.log(2))
    assert ide_loss([50.0, -50.0], 0) == pytest.approx(0.0, abs=1e-12)
    t = OffsetVector(0.1, -0.2, 0.3, 0.0)
    assert reg_loss(t, t) == 0.0
    assert reg_loss(OffsetVector(2.1, -0.2, 0.3, 0.0), t) == pytest.approx(1.5)


def test_batched_loss_gradients(rng):
    pred, target = rng.normal(0, 2, (5, 4)), rng.normal(0, 2, (5, 4))
    loss, g = reg_loss_grad(pred, target)
    assert loss == pytest.approx(sum(reg_loss(p, t) for p, t in zip(pred, target)))
    eps = 1e-6
    e = np.zeros_like(pred)
    e[2, 1] = eps
    fd = (reg_loss_grad(pred + e, target)[0] - reg_loss_grad(pred - e, target)[0]) / (2 * eps)
    assert g[2, 1] == pytest.approx(fd, abs=1e-5)

    logits, labels = rng.normal(0, 1, (4, 2)), np.array([0, 1, 1, 0])
    loss, g = ide_loss_grad(logits, labels)
    assert loss == pytest.approx(sum(ide_loss(z, k) for z, k in zip(logits, labels)))
    e = np.zeros_like(logits)
    e[1, 0] = eps
    fd = (ide_loss_grad(logits + e, labels)[0] - ide_loss_grad(logits - e, labels)[0]) / (2 * eps)
    assert g[1, 0] == pytest.approx(fd, abs=1e-5)
