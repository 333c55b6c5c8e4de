"""Function-preserving permutations and paired scalings of hidden dimensions."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, fields

import numpy as np

from .model import LayerWeights, Model, forward
from .numerics import SeededRng, is_permutation, random_permutation

FLAGS = (
    "enable_mlp_perm",
    "enable_attn_inner_perm",
    "enable_qk_perm",
    "enable_vo_scaling",
    "enable_updown_scaling",
)


class ObfuscationError(ValueError):
    pass


@dataclass(frozen=True)
class ObfuscationSpec:
    enable_mlp_perm: bool = True
    enable_attn_inner_perm: bool = True
    enable_qk_perm: bool = True
    enable_vo_scaling: bool = True
    enable_updown_scaling: bool = True
    scaling_range: tuple[float, float] = (0.5, 2.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scaling_range
        object.__setattr__(self, "scaling_range", (float(lo), float(hi)))
        if not 0 < lo <= hi:
            raise ObfuscationError(f"invalid scaling_range {self.scaling_range}")

    @classmethod
    def none(cls, seed: int = 0) -> "ObfuscationSpec":
        return cls(**{f: False for f in FLAGS}, seed=seed)

    @classmethod
    def all_combinations(cls, seed: int = 0):
        for bits in itertools.product((False, True), repeat=len(FLAGS)):
            yield cls(**dict(zip(FLAGS, bits)), seed=seed)

    def any_enabled(self) -> bool:
        return any(getattr(self, f) for f in FLAGS)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["scaling_range"] = list(self.scaling_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ObfuscationSpec":
        d = dict(d)
        if "scaling_range" in d:
            d["scaling_range"] = tuple(d["scaling_range"])
        return cls(**d)


def _check_perm(perm, n):
    perm = np.asarray(perm)
    if not is_permutation(perm, n):
        raise ObfuscationError(f"not a permutation of 0..{n - 1}")
    return perm


def _check_scale(c, n):
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (n,):
        raise ObfuscationError(f"scale vector must have length {n}")
    if not np.all(c > 0):
        raise ObfuscationError("scale factors must be positive")
    return c


def permute_mlp(layer: LayerWeights, perm) -> LayerWeights:
    """Reorder the MLP inner dimension; gate and up columns move together."""
    perm = _check_perm(perm, layer.w_up.shape[1])
    return layer.replace(
        w_gate=layer.w_gate[:, perm],
        w_up=layer.w_up[:, perm],
        w_down=layer.w_down[perm, :],
    )


def permute_attn_inner(layer: LayerWeights, perm) -> LayerWeights:
    """Reorder the value/output inner dimension (leaves ``W_v W_o`` intact)."""
    perm = _check_perm(perm, layer.w_v.shape[1])
    return layer.replace(w_v=layer.w_v[:, perm], w_o=layer.w_o[perm, :])


def permute_qk(layer: LayerWeights, perm) -> LayerWeights:
    perm = _check_perm(perm, layer.w_q.shape[1])
    return layer.replace(w_q=layer.w_q[:, perm], w_k=layer.w_k[:, perm])


def scale_pair_vo(layer: LayerWeights, c) -> LayerWeights:
    c = _check_scale(c, layer.w_v.shape[1])
    return layer.replace(w_v=layer.w_v * c, w_o=layer.w_o / c[:, None])


def scale_pair_updown(layer: LayerWeights, c) -> LayerWeights:
    # only the up path: act(G) * U is linear in U but not in G
    c = _check_scale(c, layer.w_up.shape[1])
    return layer.replace(w_up=layer.w_up * c, w_down=layer.w_down / c[:, None])


def log_uniform(rng: SeededRng, lo: float, hi: float, n: int) -> np.ndarray:
    if lo == hi:
        return np.full(n, lo)
    return np.exp(rng.uniform(math.log(lo), math.log(hi), n))


def obfuscate_layer(layer: LayerWeights, spec: ObfuscationSpec, rng: SeededRng) -> LayerWeights:
    d, p = layer.w_v.shape[1], layer.w_up.shape[1]
    lo, hi = spec.scaling_range
    # each transform owns a sub-stream so toggling one flag leaves the others' draws alone
    if spec.enable_mlp_perm:
        layer = permute_mlp(layer, random_permutation(rng.derive(0), p))
    if spec.enable_attn_inner_perm:
        layer = permute_attn_inner(layer, random_permutation(rng.derive(1), d))
    if spec.enable_qk_perm:
        layer = permute_qk(layer, random_permutation(rng.derive(2), d))
    if spec.enable_vo_scaling:
        layer = scale_pair_vo(layer, log_uniform(rng.derive(3), lo, hi, d))
    if spec.enable_updown_scaling:
        layer = scale_pair_updown(layer, log_uniform(rng.derive(4), lo, hi, p))
    return layer


def obfuscate_model(model: Model, spec: ObfuscationSpec) -> Model:
    if not spec.any_enabled():
        return model
    root = SeededRng(spec.seed, stream=2)
    layers = [obfuscate_layer(lw, spec, root.derive(i)) for i, lw in enumerate(model.layers)]
    return model.with_layers(layers)


def add_noise(model: Model, std: float, seed: int) -> Model:
    """Stress option: Gaussian noise on attention projections. NOT function-preserving."""
    if std <= 0:
        return model
    root = SeededRng(seed, stream=3)
    layers = []
    for i, lw in enumerate(model.layers):
        r = root.derive(i)
        layers.append(lw.replace(**{
            k: getattr(lw, k) + std * r.normal(getattr(lw, k).shape)
            for k in ("w_q", "w_k", "w_v", "w_o")
        }))
    return model.with_layers(layers)


def multi_token_inputs(vocab_size: int, n_multi: int, seq_len: int, seed: int = 0) -> list[np.ndarray]:
    rng = SeededRng(seed, stream=4)
    return [rng.generator.integers(0, vocab_size, seq_len) for _ in range(n_multi)]


def verify_equivalence(m1: Model, m2: Model, probe_token_ids, n_multi: int = 8,
                       seq_len: int = 6, seed: int = 0) -> float:
    """Max elementwise output discrepancy over single-token probes and
    ``n_multi`` random multi-token sequences, through all layers."""
    if m1.config != m2.config:
        raise ObfuscationError("models have different configurations")
    worst = 0.0
    for t in probe_token_ids:
        worst = max(worst, float(np.max(np.abs(forward(m1, [t]) - forward(m2, [t])))))
    for seq in multi_token_inputs(m1.config.vocab_size, n_multi, seq_len, seed):
        worst = max(worst, float(np.max(np.abs(forward(m1, seq) - forward(m2, seq)))))
    return worst
