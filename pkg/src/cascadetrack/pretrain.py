"""Offline fitting of the regressor, the identifier and the pyramid fusion on synthetic pairs.

Each pair is a template from frame 0 and a search crop from a later frame,
centered at a perturbed copy of the true box to mimic tracking error. Training
sequences use seeds disjoint from the standard evaluation suite (1..20).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config import Config
from .crac import IDE_WIDTHS, REG_WIDTHS, IdentifierModel, RegressorModel, ide_loss_grad, reg_loss_grad
from .geometry import Box, boxes_to_array, decode_offsets_array, encode_offsets_array, iou_many
from .models import ModelBundle
from .nn import Adam, HeadParams, head_backward, head_forward
from .proposal import RpnHeads, extract_proposals
from .roipool import mean_level_fusion, pyramid_stack_batch, roialign_batch
from .synth import TIERS, render_frame, scene_textures, standard_spec, background_canvas
from .tensor import DenseLayerParams, make_rng
from .tracker import Pipeline, sample_boxes, target_kernel

log = logging.getLogger(__name__)

TRAIN_SEED_BASE = 1000
VALID_SEED_BASE = 5000


@dataclass
class PairSet:
    """Pooled (unfused) training samples; ``pair`` indexes the template stack of each sample."""

    z: np.ndarray  # (P, L*C, S, S)
    reg_x: np.ndarray
    reg_pair: np.ndarray
    reg_box: np.ndarray
    reg_gt: np.ndarray
    ide_x: np.ndarray
    ide_pair: np.ndarray
    ide_y: np.ndarray  # 0 = target, 1 = background

    @property
    def n_pairs(self) -> int:
        return len(self.z)


def _stack(fmap, boxes: np.ndarray, pooling: str, levels) -> np.ndarray:
    if pooling == "proialign":
        return pyramid_stack_batch(fmap, boxes, levels).astype(np.float32)
    return roialign_batch(fmap, boxes, 6).astype(np.float32)


def make_pairs(n_pairs: int, seed_base: int, cfg: Config, pooling: str, rng_seed: int = 0) -> PairSet:
    rng = make_rng(rng_seed + seed_base)
    # pooling only matters for the stacks; proposals come from the correlation stage
    pipe = Pipeline.build(cfg.replace(pooling="proialign"), _identity_bundle(8, "proialign"))
    tiers = list(TIERS)
    z_list, rx, rp, rb, rg, ix, ip, iy = [], [], [], [], [], [], [], []
    per_seq = 4
    for k in range(math.ceil(n_pairs / per_seq)):
        spec = standard_spec(seed_base + k, tiers[k % len(tiers)])
        tex = scene_textures(spec)
        bg = background_canvas(spec.seed + 17, spec.width, spec.height)
        f0, boxes0 = render_frame(spec, 0, tex, bg)
        fz, tz = pipe.template_map(f0, boxes0[0])
        bz = tz.box_to_patch(boxes0[0])
        kernel = target_kernel(fz, bz)
        z_stack = _stack(fz, bz.as_array()[None], pooling, cfg.pyramid_levels)[0]
        for _ in range(per_seq):
            if len(z_list) == n_pairs:
                break
            pid = len(z_list)
            z_list.append(z_stack)
            t = int(rng.integers(1, spec.frames))
            frame, boxes = render_frame(spec, t, tex, bg)
            gt = boxes[0]
            spread = 0.1 if rng.uniform() < 0.7 else 0.3
            prev = Box(
                gt.cx + rng.normal(0, spread) * gt.w,
                gt.cy + rng.normal(0, spread) * gt.h,
                gt.w * math.exp(rng.normal(0, 0.08)),
                gt.h * math.exp(rng.normal(0, 0.08)),
            )
            fx, tx = pipe.search(frame, prev)
            g = tx.box_to_patch(gt)
            bounds = (0.0, 0.0, float(cfg.search_size), float(cfg.search_size))
            props = extract_proposals(kernel, fx, pipe.anchors, RpnHeads(), cfg.N, cfg.nms_thr)
            pb = boxes_to_array([p.box for p in props])
            ov = iou_many(g, pb)
            # regression: proposals that touch the target plus jitters around it
            reg = np.concatenate([pb[ov > 0.1], sample_boxes(rng, g, 16, 0.2, 0.3, 0.15, 1.01, bounds)])
            # identification: tight positives; distractors, off-target proposals and background as negatives
            pos = sample_boxes(rng, g, 8, 0.06, 0.08, 0.6, 1.01, bounds)
            negs = [pb[ov < 0.3]]
            for d in boxes[1:]:
                dp = tx.box_to_patch(d)
                if 0 <= dp.cx <= cfg.search_size and 0 <= dp.cy <= cfg.search_size and iou_many(g, dp.as_array()[None])[0] < 0.3:
                    negs.append(sample_boxes(rng, dp, 4, 0.06, 0.08, 0.6, 1.01, bounds))
            negs.append(sample_boxes(rng, g, 6, 1.0, 0.3, -1.0, 0.3, bounds))
            negs.append(sample_boxes(rng, g, 4, 0.45, 0.2, 0.05, 0.3, bounds))
            neg = np.concatenate(negs)
            rx.append(_stack(fx, reg, pooling, cfg.pyramid_levels))
            rp.append(np.full(len(reg), pid))
            rb.append(reg)
            rg.append(np.tile(g.as_array(), (len(reg), 1)))
            ide = np.concatenate([pos, neg])
            ix.append(_stack(fx, ide, pooling, cfg.pyramid_levels))
            ip.append(np.full(len(ide), pid))
            iy.append(np.concatenate([np.zeros(len(pos), np.int64), np.ones(len(neg), np.int64)]))
    return PairSet(
        np.stack(z_list),
        np.concatenate(rx),
        np.concatenate(rp),
        np.concatenate(rb),
        np.concatenate(rg),
        np.concatenate(ix),
        np.concatenate(ip),
        np.concatenate(iy),
    )


def _identity_bundle(channels: int, pooling: str) -> ModelBundle:
    fusion = mean_level_fusion(channels, 3) if pooling == "proialign" else None
    return ModelBundle(RegressorModel.init(channels, zero_last=True), IdentifierModel.init(channels), pooling, fusion)


def _fuse(stack: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("oc,ncyx->noyx", w, stack, optimize=True) + b[None, :, None, None]


def _fusion_grad(dfeat: np.ndarray, stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.einsum("noyx,ncyx->oc", dfeat, stack, optimize=True), dfeat.sum(axis=(0, 2, 3))


def fit(data: PairSet, pooling: str, channels: int = 8, epochs: int = 30, batch: int = 64, lr: float = 1e-3, seed: int = 0) -> ModelBundle:
    rng = make_rng(seed)
    spatial = data.reg_x.shape[-1] ** 2
    reg = HeadParams.init(rng, 2 * channels, channels, spatial, list(REG_WIDTHS), zero_last=True)
    ide = HeadParams.init(rng, 2 * channels, channels, spatial, list(IDE_WIDTHS))
    params = reg.arrays() + ide.arrays()
    if pooling == "proialign":
        fw = mean_level_fusion(channels, data.z.shape[1] // channels).weights[:, :, 0, 0].astype(np.float64)
        fb = np.zeros(channels)
        params += [fw, fb]
    else:
        fw = fb = None
    opt = Adam(params, lr=lr)
    n_reg, n_ide = len(data.reg_x), len(data.ide_x)
    reg_t = encode_offsets_array(data.reg_box, data.reg_gt)
    steps = max(n_reg, n_ide) // batch
    for ep in range(epochs):
        pr, pi = rng.permutation(n_reg), rng.permutation(n_ide)
        tot_r = tot_i = 0.0
        for s in range(steps):
            br = pr[(s * batch) % n_reg :][:batch]
            bi = pi[(s * batch) % n_ide :][:batch]
            grads = []
            fgrads = [np.zeros_like(fw), np.zeros_like(fb)] if fw is not None else None
            for head, idx, xs, pair, lossfn, tgt in (
                (reg, br, data.reg_x, data.reg_pair, reg_loss_grad, reg_t),
                (ide, bi, data.ide_x, data.ide_pair, ide_loss_grad, data.ide_y),
            ):
                xi = xs[idx].astype(np.float64)
                zi = data.z[pair[idx]].astype(np.float64)
                if fw is not None:
                    fi, fz = _fuse(xi, fw, fb), _fuse(zi, fw, fb)
                else:
                    fi, fz = xi, zi
                out, cache = head_forward(head, np.concatenate([fi, fz], axis=1), keep=True)
                loss, dout = lossfn(out, tgt[idx])
                nb = len(idx)
                g, dx = head_backward(head, cache, dout / nb, need_input_grad=fw is not None)
                grads += g
                if fw is not None:
                    for part, src in ((dx[:, :channels], xi), (dx[:, channels:], zi)):
                        gw, gb = _fusion_grad(part, src)
                        fgrads[0] += gw
                        fgrads[1] += gb
                if head is reg:
                    tot_r += loss / nb
                else:
                    tot_i += loss / nb
            if fgrads is not None:
                grads += fgrads
            opt.step(grads)
        log.info("epoch %d reg %.4f ide %.4f", ep, tot_r / steps, tot_i / steps)
    fusion = DenseLayerParams.conv1x1(fw, fb) if fw is not None else None
    return ModelBundle(
        RegressorModel.from_head(reg),
        IdentifierModel.from_head(ide),
        pooling,
        fusion,
        {"epochs": epochs, "seed": seed, "pairs": int(data.n_pairs)},
    )


def evaluate(bundle: ModelBundle, data: PairSet, batch: int = 4096) -> dict:
    """Held-out regression gain (IoU before/after) and identifier accuracy."""
    if bundle.fusion is not None:
        w = bundle.fusion.weights[:, :, 0, 0].astype(np.float64)
        b = bundle.fusion.bias.astype(np.float64)
        fuse = lambda x: _fuse(x.astype(np.float64), w, b)  # noqa: E731
    else:
        fuse = lambda x: x.astype(np.float64)  # noqa: E731
    z = fuse(data.z)
    dec = np.concatenate([
        decode_offsets_array(
            data.reg_box[i : i + batch],
            head_forward(bundle.regressor.head, np.concatenate([fuse(data.reg_x[i : i + batch]), z[data.reg_pair[i : i + batch]]], axis=1))[0],
        )
        for i in range(0, len(data.reg_x), batch)
    ])
    before = np.array([iou_many(Box(*g), b[None])[0] for g, b in zip(data.reg_gt, data.reg_box)])
    after = np.array([iou_many(Box(*g), b[None])[0] for g, b in zip(data.reg_gt, dec)])
    pred = np.concatenate([
        np.argmax(head_forward(bundle.identifier.head, np.concatenate([fuse(data.ide_x[i : i + batch]), z[data.ide_pair[i : i + batch]]], axis=1))[0], axis=1)
        for i in range(0, len(data.ide_x), batch)
    ])
    acc = float(np.mean(pred == data.ide_y))
    return {"iou_before": float(before.mean()), "iou_after": float(after.mean()), "identifier_accuracy": acc}


def pretrain(pooling: str = "proialign", n_pairs: int = 8000, epochs: int = 10, seed: int = 0, cfg: Config | None = None):
    cfg = cfg or Config()
    train = make_pairs(n_pairs, TRAIN_SEED_BASE, cfg, pooling, seed)
    bundle = fit(train, pooling, epochs=epochs, seed=seed)
    del train
    valid = make_pairs(max(40, n_pairs // 5), VALID_SEED_BASE, cfg, pooling, seed)
    return bundle, evaluate(bundle, valid)
