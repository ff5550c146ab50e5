"""Tracker configuration and its flat ``key=value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    N: int = 10
    alpha: float = 0.4
    beta: float = 0.8
    K: int = 10
    n_pos: int = 50
    n_neg: int = 200
    init_pos: int = 200
    init_neg: int = 1000
    anchor_ratios: tuple[float, ...] = (0.33, 0.5, 1.0, 2.0, 3.0)
    anchor_scales: tuple[float, ...] = (64.0,)
    anchor_pos_thr: float = 0.6
    anchor_neg_thr: float = 0.3
    refine_iou_thr: float = 0.5
    sample_neg_thr: float = 0.3
    pyramid_levels: tuple[int, ...] = (6, 3, 1)
    lam: float = 0.1
    cg_tol: float = 1e-6
    cg_max_iters: int = 60
    nms_thr: float = 0.6
    template_size: int = 128
    template_context: float = 2.0
    search_size: int = 256
    search_context: float = 4.0
    pos_sigma_center: float = 0.1
    pos_sigma_scale: float = 0.2
    neg_sigma_center: float = 1.0
    neg_sigma_scale: float = 0.3
    hard_neg_quota: int = 50
    memory_cycles: int = 60
    short_cycles: int = 5
    scale_damping: float = 0.3
    window_influence: float = 0.0
    seed: int = 0
    refinement: str = "cascade"
    classifier: str = "joint"
    pooling: str = "proialign"
    identifier_mode: str = "softmax-positive"
    rpn_mode: str = "correlation-only"
    weights: str = "builtin"

    def __post_init__(self):
        counts = ("N", "K", "n_pos", "n_neg", "init_pos", "init_neg", "cg_max_iters", "memory_cycles", "short_cycles")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hard_neg_quota < 0 or self.hard_neg_quota > self.n_neg:
            raise ConfigError("hard_neg_quota must lie in [0, n_neg]")
        for name in ("alpha", "beta", "nms_thr", "anchor_pos_thr", "anchor_neg_thr", "refine_iou_thr", "sample_neg_thr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.anchor_neg_thr > self.anchor_pos_thr:
            raise ConfigError("anchor_neg_thr must not exceed anchor_pos_thr")
        if self.sample_neg_thr > self.refine_iou_thr:
            raise ConfigError("sample_neg_thr must not exceed refine_iou_thr")
        if not 0.0 < self.scale_damping <= 1.0:
            raise ConfigError("scale_damping must lie in (0, 1]")
        if not 0.0 <= self.window_influence <= 1.0:
            raise ConfigError("window_influence must lie in [0, 1]")
        if self.lam <= 0 or self.cg_tol <= 0:
            raise ConfigError("lam and cg_tol must be positive")
        if self.short_cycles > self.memory_cycles:
            raise ConfigError("short_cycles must not exceed memory_cycles")
        choices = {
            "refinement": ("cascade", "parallel"),
            "classifier": ("identifier", "discriminator", "joint"),
            "pooling": ("proialign", "roialign"),
            "identifier_mode": ("softmax-positive", "cosine-fallback"),
            "rpn_mode": ("correlation-only", "trained"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        for name in ("template_size", "search_size"):
            v = getattr(self, name)
            if v < 16 or v % 16:
                raise ConfigError(f"{name} must be a positive multiple of 16")

    @property
    def fusion_alpha(self) -> float:
        """Identifier weight actually used, after the classifier toggle."""
        return {"identifier": 1.0, "discriminator": 0.0}.get(self.classifier, self.alpha)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Config":
        hints = get_type_hints(cls)
        known = {f.name for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                kw[key] = _parse(hints[key], val)
            except ValueError as e:
                raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse(tp, val: str):
    if tp is int:
        return int(val)
    if tp is float:
        return float(val)
    if tp is str:
        return val
    if tp == tuple[float, ...]:
        return tuple(float(x) for x in val.split(",") if x.strip())
    if tp == tuple[int, ...]:
        return tuple(int(x) for x in val.split(",") if x.strip())
    raise ValueError(f"unsupported type {tp}")
