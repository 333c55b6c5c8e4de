"""Injected rank-s LoRA deltas on attention projections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import LayerWeights, Model, ModelConfig
from .numerics import SeededRng, singular_values

TARGETS = {"Q": "w_q", "K": "w_k", "V": "w_v", "O": "w_o"}


class LoraSpecError(ValueError):
    pass


@dataclass(frozen=True)
class LoraSpec:
    rank: int
    targets: tuple[str, ...] = ("V",)
    scale: float | None = None  # None -> 0.02 / sqrt(rank)
    seed: int = 0
    layers: tuple[int, ...] | None = None  # None -> every layer

    def __post_init__(self):
        bad = set(self.targets) - set(TARGETS)
        if bad:
            raise LoraSpecError(f"unknown LoRA targets {sorted(bad)}")
        object.__setattr__(self, "targets", tuple(sorted(set(self.targets), key="QKVO".index)))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if self.rank < 1:
            raise LoraSpecError("rank must be >= 1")
        if self.scale is not None and not self.scale > 0:
            raise LoraSpecError("scale must be positive")

    @property
    def factor_scale(self) -> float:
        return self.scale if self.scale is not None else 0.02 / math.sqrt(self.rank)

    def layer_indices(self, cfg: ModelConfig) -> tuple[int, ...]:
        if self.layers is None:
            return tuple(range(cfg.num_layers))
        return self.layers

    def validate(self, cfg: ModelConfig):
        if 2 * self.rank > cfg.hidden_size:
            raise LoraSpecError(
                f"rank {self.rank} exceeds half the hidden size {cfg.hidden_size}")
        for i in self.layer_indices(cfg):
            if not 0 <= i < cfg.num_layers:
                raise LoraSpecError(f"layer index {i} out of range")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "targets": list(self.targets),
            "scale": self.scale,
            "seed": self.seed,
            "layers": None if self.layers is None else list(self.layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraSpec":
        d = dict(d)
        if d.get("layers") is not None:
            d["layers"] = tuple(d["layers"])
        d["targets"] = tuple(d.get("targets", ("V",)))
        return cls(**d)


@dataclass(frozen=True)
class LoraDelta:
    rank: int
    scale: float
    # (layer, target) -> (A: d x s, B: s x d)
    factors: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def delta(self, layer: int, target: str) -> np.ndarray:
        a, b = self.factors[(layer, target)]
        return self.scale * (a @ b)


def make_delta(spec: LoraSpec, cfg: ModelConfig) -> LoraDelta:
    spec.validate(cfg)
    d, s = cfg.hidden_size, spec.rank
    root = SeededRng(spec.seed, stream=1)
    factors = {}
    for i in spec.layer_indices(cfg):
        for t in spec.targets:
            r = root.derive(i, "QKVO".index(t))
            factors[(i, t)] = (r.normal((d, s)), r.normal((s, d)))
    return LoraDelta(s, spec.factor_scale, factors)


def apply(model: Model, delta: LoraDelta) -> Model:
    """Candidate model with ``W_t + scale * A @ B`` on every targeted projection."""
    layers = list(model.layers)
    for (i, t), (a, b) in sorted(delta.factors.items()):
        name = TARGETS[t]
        w = getattr(layers[i], name)
        dw = delta.scale * (a @ b)
        if dw.shape != w.shape:
            raise ValueError(f"delta shape {dw.shape} does not match {name} {w.shape}")
        layers[i] = layers[i].replace(**{name: w + dw})
    return model.with_layers(layers)


def finetune(model: Model, spec: LoraSpec) -> Model:
    return apply(model, make_delta(spec, model.config))


def product_delta_rank(base: LayerWeights, cand: LayerWeights, rel_threshold: float = 1e-6) -> int:
    """Numerical rank of ``W_v W_o`` (base) minus the candidate's product."""
    if not 0 < rel_threshold < 1:
        raise ValueError("rel_threshold must lie in (0, 1)")
    ref = base.w_v @ base.w_o
    diff = ref - cand.w_v @ cand.w_o
    sv = singular_values(diff)
    if sv[0] < 1e-12 * np.linalg.norm(ref):
        return 0
    return int(np.count_nonzero(sv > rel_threshold * sv[0]))
