"""Single-head decoder-only transformer with per-layer capture.

Row-vector convention throughout: an input of ``n`` tokens is an ``n x d``
matrix and projections act on the right (``X @ W``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import erf

from .numerics import SeededRng, as_matrix, random_matrix

ACTIVATIONS = ("silu", "gelu")
NORM_MODES = ("paper_literal", "mean_normalized")

# tensor names, in storage order
LAYER_TENSORS = ("w_q", "w_k", "w_v", "w_o", "attn_norm", "mlp_norm", "w_gate", "w_up", "w_down")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int
    mlp_size: int
    num_layers: int
    vocab_size: int
    norm_eps: float = 1e-6
    rope_base: float = 10000.0
    activation: str = "silu"
    norm_mode: str = "paper_literal"

    def __post_init__(self):
        for name in ("hidden_size", "mlp_size", "num_layers", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.hidden_size % 2:
            raise ConfigError("hidden_size must be even for rotary embedding")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"unknown norm_mode {self.norm_mode!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def shapes_ok(self, cfg: ModelConfig) -> bool:
        return all(getattr(self, k).shape == s for k, s in layer_shapes(cfg).items())

    def replace(self, **changes) -> "LayerWeights":
        return replace(self, **changes)


def layer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, p = cfg.hidden_size, cfg.mlp_size
    return {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "attn_norm": (d,), "mlp_norm": (d,),
        "w_gate": (d, p), "w_up": (d, p), "w_down": (p, d),
    }


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    embedding: np.ndarray
    layers: tuple[LayerWeights, ...]

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ConfigError(f"expected {cfg.num_layers} layers, got {len(self.layers)}")
        if self.embedding.shape != (cfg.vocab_size, cfg.hidden_size):
            raise ConfigError(f"embedding shape {self.embedding.shape} does not match config")
        for i, lw in enumerate(self.layers):
            if not lw.shapes_ok(cfg):
                raise ConfigError(f"layer {i} has wrong tensor shapes")

    def with_layers(self, layers) -> "Model":
        return Model(self.config, self.embedding, tuple(layers))


@dataclass(frozen=True)
class LayerTrace:
    layer_index: int
    x_in: np.ndarray
    y_mid: np.ndarray
    z_out: np.ndarray


def _norm_denominator(x: np.ndarray, eps: float, mode: str) -> np.ndarray:
    sq = np.sum(x * x, axis=-1, keepdims=True)
    if mode == "mean_normalized":
        sq = sq / x.shape[-1]
    return np.sqrt(sq + eps)


def rms_norm(x, gamma, eps: float, mode: str = "paper_literal") -> np.ndarray:
    """Row-wise ``(x * gamma) / sqrt(|x|^2 + eps)`` (``|x|^2 / d`` when mean_normalized)."""
    x = np.asarray(x, dtype=np.float64)
    return (x * gamma) / _norm_denominator(x, eps, mode)


def rope_angles(pos: int, d: int, base: float) -> np.ndarray:
    i = np.arange(d // 2)
    return pos * base ** (-2.0 * i / d)


def rope_rotate(v, pos: int, base: float = 10000.0) -> np.ndarray:
    """Rotate coordinate pairs (2i, 2i+1) of ``v`` by ``pos * base**(-2i/d)``."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    if d % 2:
        raise ConfigError("rotary embedding needs an even dimension")
    ang = rope_angles(pos, d, base)
    c, s = np.cos(ang), np.sin(ang)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = np.empty_like(v)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _rope_rows(h: np.ndarray, base: float) -> np.ndarray:
    if h.shape[0] == 1:
        # position 0 is the identity rotation
        return h
    return np.stack([rope_rotate(h[i], i, base) for i in range(h.shape[0])])


def softmax_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def attention_weights(X, w: LayerWeights, cfg: ModelConfig) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if n == 1:
        return np.ones((1, 1))
    hr = _rope_rows(rms_norm(X, w.attn_norm, cfg.norm_eps, cfg.norm_mode), cfg.rope_base)
    scores = (hr @ w.w_q) @ (hr @ w.w_k).T / math.sqrt(d)
    scores = np.where(np.tril(np.ones((n, n), dtype=bool)), scores, -np.inf)
    return softmax_rows(scores)


def attention(X, w: LayerWeights, cfg: ModelConfig) -> np.ndarray:
    """Residual self-attention block: ``softmax(QK^T/sqrt(d)) h(X) W_v W_o + X``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    h = rms_norm(X, w.attn_norm, cfg.norm_eps, cfg.norm_mode)
    vo = (h @ w.w_v) @ w.w_o
    if X.shape[0] == 1:
        return vo + X
    return attention_weights(X, w, cfg) @ vo + X


def activation(x, kind: str) -> np.ndarray:
    if kind == "silu":
        return x / (1.0 + np.exp(-x))
    if kind == "gelu":
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
    raise ConfigError(f"unknown activation {kind!r}")


def activation_grad(x, kind: str) -> np.ndarray:
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-x))
        return s * (1.0 + x * (1.0 - s))
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
        return cdf + x * pdf
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class MlpParts:
    """Intermediates of one MLP evaluation, kept for backprop."""

    y: np.ndarray
    denom: np.ndarray
    h: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    act: np.ndarray
    out: np.ndarray


def mlp_parts(Y, w: LayerWeights, cfg: ModelConfig) -> MlpParts:
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    denom = _norm_denominator(Y, cfg.norm_eps, cfg.norm_mode)
    h = (Y * w.mlp_norm) / denom
    gate = h @ w.w_gate
    up = h @ w.w_up
    act = activation(gate, cfg.activation)
    out = (act * up) @ w.w_down + Y
    return MlpParts(Y, denom, h, gate, up, act, out)


def mlp_forward(Y, w: LayerWeights, cfg: ModelConfig) -> np.ndarray:
    """Residual gated MLP: ``(act(h W_G) * (h W_up)) W_down + Y``."""
    return mlp_parts(Y, w, cfg).out


def layer_forward(X, w: LayerWeights, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    y = attention(X, w, cfg)
    return y, mlp_forward(y, w, cfg)


def embed(model: Model, token_ids) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise IndexError("empty token sequence")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise IndexError(f"token id out of vocabulary (size {model.config.vocab_size})")
    return model.embedding[ids]


def forward(model: Model, token_ids) -> np.ndarray:
    x = embed(model, token_ids)
    for lw in model.layers:
        _, x = layer_forward(x, lw, model.config)
    return x


def forward_capture(model: Model, token_ids) -> list[LayerTrace]:
    x = embed(model, token_ids)
    traces = []
    for i, lw in enumerate(model.layers):
        y, z = layer_forward(x, lw, model.config)
        traces.append(LayerTrace(i, x, y, z))
        x = z
    return traces


def generate_model(cfg: ModelConfig, seed: int) -> Model:
    """Gaussian weights with std ``1/sqrt(d)``, all-ones norm weights."""
    d, p = cfg.hidden_size, cfg.mlp_size
    scale = 1.0 / math.sqrt(d)
    root = SeededRng(seed, stream=0)
    embedding = random_matrix(root.derive(0), cfg.vocab_size, d, scale)
    layers = []
    for i in range(cfg.num_layers):
        r = root.derive(1, i)
        mats = {}
        for name, shape in layer_shapes(cfg).items():
            if len(shape) == 1:
                mats[name] = np.ones(shape)
            else:
                mats[name] = random_matrix(r, *shape, scale)
        layers.append(LayerWeights(**mats))
    return Model(cfg, as_matrix(embedding), tuple(layers))


def single_token_layer(X, w: LayerWeights, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Layer forward where every row of ``X`` is its own length-1 sequence."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    h = rms_norm(X, w.attn_norm, cfg.norm_eps, cfg.norm_mode)
    y = (h @ w.w_v) @ w.w_o + X
    return y, mlp_forward(y, w, cfg)


def probe_capture(model: Model, token_ids) -> list[LayerTrace]:
    """Per-layer traces for independent single-token probes, stacked row-wise."""
    x = embed(model, token_ids)
    traces = []
    for i, lw in enumerate(model.layers):
        y, z = single_token_layer(x, lw, model.config)
        traces.append(LayerTrace(i, x, y, z))
        x = z
    return traces
