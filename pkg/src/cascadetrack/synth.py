"""Seeded synthetic sequences with exact ground truth and optional distractors."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .backbone import ImagePatch
from .geometry import Box
from .tensor import bilinear_matrix, make_rng

TEXTURE_SIZE = 64


@dataclass
class PatchSpec:
    """A textured rectangle moving linearly with exponential scale change."""

    texture_seed: int
    cx: float
    cy: float
    w: float
    h: float
    vx: float = 0.0
    vy: float = 0.0
    scale_rate: float = 0.0
    deform_jitter: float = 0.0
    similarity: float = 0.0  # distractors only: blend weight of the target texture

    def box_at(self, t: int, jitter: float = 0.0) -> Box:
        s = (1.0 + self.scale_rate) ** t
        a = math.exp(jitter)
        return Box(self.cx + self.vx * t, self.cy + self.vy * t, self.w * s * a, self.h * s / a)


@dataclass
class SyntheticSceneSpec:
    width: int = 480
    height: int = 360
    target: PatchSpec = field(default_factory=lambda: PatchSpec(1, 240.0, 180.0, 64.0, 64.0))
    distractors: list[PatchSpec] = field(default_factory=list)
    noise: float = 0.02
    frames: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.width < 16 or self.height < 16 or self.frames < 1:
            raise ValueError("canvas must be at least 16x16 and frames >= 1")
        if self.noise < 0:
            raise ValueError("noise level must be non-negative")
        for d in self.distractors:
            if not 0.0 <= d.similarity <= 1.0:
                raise ValueError(f"distractor similarity must lie in [0, 1], got {d.similarity}")
        for t in range(self.frames):
            for i, b in enumerate(self.boxes_at(t)):
                x1, y1, x2, y2 = b.to_xyxy()
                if x1 < 1 or y1 < 1 or x2 > self.width - 1 or y2 > self.height - 1:
                    who = "target" if i == 0 else f"distractor {i - 1}"
                    raise ValueError(f"{who} leaves the canvas at frame {t}: {b}")

    def jitter(self, t: int, which: int) -> float:
        spec = self.target if which == 0 else self.distractors[which - 1]
        if spec.deform_jitter <= 0:
            return 0.0
        rng = make_rng(self.seed * 1_000_003 + t * 101 + which + 7)
        return float(np.clip(rng.normal(0.0, spec.deform_jitter), -3 * spec.deform_jitter, 3 * spec.deform_jitter))

    def boxes_at(self, t: int) -> list[Box]:
        specs = [self.target] + list(self.distractors)
        return [s.box_at(t, self.jitter(t, i)) for i, s in enumerate(specs)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["target"] = PatchSpec(**d["target"])
        d["distractors"] = [PatchSpec(**x) for x in d.get("distractors", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSceneSpec":
        return cls.from_dict(json.loads(text))


def _smooth_noise(rng: np.random.Generator, grid: int, size: int) -> np.ndarray:
    g = rng.uniform(0.0, 1.0, size=(grid, grid))
    m = bilinear_matrix(grid, size)
    return m @ g @ m.T


def make_texture(seed: int, size: int = TEXTURE_SIZE) -> np.ndarray:
    """Blob texture in ``[0, 1]`` with structure at the 8 and 16 pixel scale."""
    rng = make_rng(seed)
    t = 0.55 * _smooth_noise(rng, size // 8, size) + 0.45 * _smooth_noise(rng, size // 16, size)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    return 0.1 + 0.8 * t


def distractor_texture(target_seed: int, own_seed: int, similarity: float) -> np.ndarray:
    return similarity * make_texture(target_seed) + (1.0 - similarity) * make_texture(own_seed)


def background_canvas(seed: int, width: int, height: int) -> np.ndarray:
    rng = make_rng(seed)
    gy, gx = max(2, height // 60), max(2, width // 60)
    g = rng.uniform(0.0, 1.0, size=(gy, gx))
    bg = bilinear_matrix(gy, height) @ g @ bilinear_matrix(gx, width).T
    return 0.35 + 0.3 * bg


def _paste(canvas: np.ndarray, texture: np.ndarray, box: Box) -> None:
    """Paint ``texture`` over pixels whose centers fall inside ``box``."""
    h, w = canvas.shape
    x1, y1, x2, y2 = box.to_xyxy()
    c0, c1 = max(0, math.ceil(x1 - 0.5)), min(w, math.ceil(x2 - 0.5))
    r0, r1 = max(0, math.ceil(y1 - 0.5)), min(h, math.ceil(y2 - 0.5))
    if c0 >= c1 or r0 >= r1:
        return
    th, tw = texture.shape
    xs = ((np.arange(c0, c1) + 0.5 - x1) / box.w) * tw - 0.5
    ys = ((np.arange(r0, r1) + 0.5 - y1) / box.h) * th - 0.5
    xs = np.clip(xs, 0, tw - 1)
    ys = np.clip(ys, 0, th - 1)
    tex = texture.astype(np.float32)[None]
    patch = kernels.sample_grid(tex, ys, xs, np.zeros(1))[0]
    canvas[r0:r1, c0:c1] = patch


def render_frame(spec: SyntheticSceneSpec, t: int, textures=None, background=None) -> tuple[ImagePatch, list[Box]]:
    if textures is None:
        textures = scene_textures(spec)
    if background is None:
        background = background_canvas(spec.seed + 17, spec.width, spec.height)
    canvas = background.copy()
    boxes = spec.boxes_at(t)
    # distractors first so the target is never occluded
    for tex, box in list(zip(textures, boxes))[1:]:
        _paste(canvas, tex, box)
    _paste(canvas, textures[0], boxes[0])
    if spec.noise > 0:
        canvas = canvas + make_rng(spec.seed * 7919 + t + 1).normal(0.0, spec.noise, size=canvas.shape)
    img = np.clip(np.round(canvas * 255.0), 0, 255) / 255.0
    return ImagePatch(img.astype(np.float32)), boxes


def scene_textures(spec: SyntheticSceneSpec) -> list[np.ndarray]:
    out = [make_texture(spec.target.texture_seed)]
    for d in spec.distractors:
        out.append(distractor_texture(spec.target.texture_seed, d.texture_seed, d.similarity))
    return out


def gen_sequence(spec: SyntheticSceneSpec) -> tuple[list[ImagePatch], list[Box]]:
    """Render every frame; frames are quantized to 8 bits so PGM round trips are exact."""
    spec.validate()
    textures = scene_textures(spec)
    bg = background_canvas(spec.seed + 17, spec.width, spec.height)
    frames, gt = [], []
    for t in range(spec.frames):
        img, boxes = render_frame(spec, t, textures, bg)
        frames.append(img)
        gt.append(boxes[0])
    return frames, gt


TIERS = {"none": None, "sim0.5": 0.5, "sim0.9": 0.9}


def standard_spec(seed: int, tier: str = "none", frames: int = 100) -> SyntheticSceneSpec:
    """One sequence of the standard suite: 64-px target, 480x360 canvas, seeded motion."""
    if tier not in TIERS:
        raise ValueError(f"unknown tier {tier!r}; choose from {sorted(TIERS)}")
    similarity = TIERS[tier]
    rng = make_rng(10_000 + seed)
    width, height = 480, 360
    for _ in range(1000):
        speed = rng.uniform(0.5, 1.5)
        ang = rng.uniform(0.0, 2 * math.pi)
        vx, vy = speed * math.cos(ang), speed * math.sin(ang)
        rate = rng.uniform(-0.002, 0.002)
        end_scale = (1 + rate) ** (frames - 1)
        half = 32 * max(1.0, end_scale) + 4
        lo_x = max(half, half - vx * (frames - 1))
        hi_x = min(width - half, width - half - vx * (frames - 1))
        lo_y = max(half, half - vy * (frames - 1))
        hi_y = min(height - half, height - half - vy * (frames - 1))
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        target = PatchSpec(
            texture_seed=seed * 31 + 5,
            cx=float(rng.uniform(lo_x, hi_x)),
            cy=float(rng.uniform(lo_y, hi_y)),
            w=64.0,
            h=64.0,
            vx=float(vx),
            vy=float(vy),
            scale_rate=float(rate),
            deform_jitter=0.01,
        )
        spec = SyntheticSceneSpec(width, height, target, [], noise=0.02, frames=frames, seed=seed)
        if similarity is not None:
            spec.distractors = _place_distractors(rng, spec, similarity, seed)
            if spec.distractors is None:
                continue
        spec.validate()
        return spec
    raise RuntimeError(f"could not place a valid scene for seed {seed}")


def _place_distractors(rng, spec: SyntheticSceneSpec, similarity: float, seed: int, count: int = 2):
    out = []
    for k in range(count):
        for _ in range(200):
            t_meet = int(rng.integers(spec.frames // 5, 4 * spec.frames // 5))
            tb = spec.target.box_at(t_meet)
            dist = rng.uniform(72.0, 100.0)
            ang = rng.uniform(0.0, 2 * math.pi)
            speed = rng.uniform(0.5, 2.0)
            vang = rng.uniform(0.0, 2 * math.pi)
            d = PatchSpec(
                texture_seed=seed * 31 + 1000 + k,
                cx=0.0,
                cy=0.0,
                w=64.0,
                h=64.0,
                vx=float(speed * math.cos(vang)),
                vy=float(speed * math.sin(vang)),
                similarity=similarity,
            )
            d.cx = float(tb.cx + dist * math.cos(ang) - d.vx * t_meet)
            d.cy = float(tb.cy + dist * math.sin(ang) - d.vy * t_meet)
            ok = True
            for t in range(spec.frames):
                b = d.box_at(t)
                x1, y1, x2, y2 = b.to_xyxy()
                if x1 < 1 or y1 < 1 or x2 > spec.width - 1 or y2 > spec.height - 1:
                    ok = False
                    break
            if ok:
                out.append(d)
                break
        else:
            return None
    return out
