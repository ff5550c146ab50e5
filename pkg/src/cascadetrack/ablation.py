"""Run tracker variants on identical seeded sequences and compare them."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import Config
from .evaluation import EvalResult, eval_ope
from .synth import SyntheticSceneSpec, gen_sequence, standard_spec
from .tracker import Pipeline, track_sequence

ARMS = {
    "cascaded": {"refinement": "cascade"},
    "parallel": {"refinement": "parallel"},
    "joint": {"classifier": "joint"},
    "identifier": {"classifier": "identifier"},
    "discriminator": {"classifier": "discriminator"},
    "proialign": {"pooling": "proialign"},
    "roialign": {"pooling": "roialign"},
}

# (better-or-equal arm, compared arm) pairs reported in the comparison table
COMPARISONS = (
    ("cascaded", "parallel"),
    ("joint", "identifier"),
    ("joint", "discriminator"),
    ("proialign", "roialign"),
)


def standard_suite(tier: str = "sim0.9", seeds: Sequence[int] = range(1, 21), frames: int = 100) -> list[SyntheticSceneSpec]:
    return [standard_spec(s, tier, frames) for s in seeds]


def arm_config(base: Config, arm: str) -> Config:
    try:
        return base.replace(**ARMS[arm])
    except KeyError:
        raise ValueError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}") from None


def run_sequence(spec: SyntheticSceneSpec, cfg: Config, pipe: Pipeline | None = None, data=None) -> EvalResult:
    frames, gt = data if data is not None else gen_sequence(spec)
    t0 = time.perf_counter()
    boxes, _ = track_sequence(frames, gt[0], cfg, pipe)
    dt = time.perf_counter() - t0
    return eval_ope(boxes, gt, fps=(len(frames) - 1) / dt if dt > 0 else 0.0)


@dataclass
class AblationTable:
    arms: dict[str, list[EvalResult]]
    seeds: list[int]

    def success(self, arm: str) -> np.ndarray:
        return np.array([r.success_auc for r in self.arms[arm]])

    def win_rate(self, better: str, worse: str) -> float:
        """Share of sequences where ``better`` scores at least as high as ``worse``."""
        return float(np.mean(self.success(better) >= self.success(worse)))

    def joint_rate(self) -> float:
        j = self.success("joint")
        return float(np.mean((j >= self.success("identifier")) & (j >= self.success("discriminator"))))

    def to_json_dict(self) -> dict:
        out = {"seeds": self.seeds, "arms": {}, "comparisons": {}}
        for arm, res in self.arms.items():
            out["arms"][arm] = {
                "precision": float(np.mean([r.precision for r in res])),
                "success_auc": float(np.mean([r.success_auc for r in res])),
                "per_sequence_success_auc": [r.success_auc for r in res],
                "per_sequence_precision": [r.precision for r in res],
                "fps": float(np.mean([r.fps for r in res])),
            }
        for a, b in COMPARISONS:
            if a in self.arms and b in self.arms:
                out["comparisons"][f"{a}>={b}"] = self.win_rate(a, b)
        return out


def run_ablation(specs: Sequence[SyntheticSceneSpec], cfg: Config, arms: Sequence[str], models=None) -> AblationTable:
    """Evaluate each arm on the same sequences; arms that share a config run once."""
    configs = {arm: arm_config(cfg, arm) for arm in arms}
    pipes: dict[str, Pipeline] = {}
    results: dict[Config, list[EvalResult]] = {c: [] for c in configs.values()}
    for spec in specs:
        data = gen_sequence(spec)
        for c in results:
            if c.pooling not in pipes:
                bundle = models.get(c.pooling) if isinstance(models, dict) else None
                pipes[c.pooling] = Pipeline.build(c.replace(refinement="cascade", classifier="joint"), bundle)
            base = pipes[c.pooling]
            pipe = Pipeline(c, base.bundle, base.backbone, base.pyramid, base.identifier, base.rpn, base.anchors)
            results[c].append(run_sequence(spec, c, pipe, data))
    return AblationTable({arm: results[c] for arm, c in configs.items()}, [s.seed for s in specs])
