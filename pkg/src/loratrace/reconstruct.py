"""Recover a layer's intermediate state from its output by descending on
``|MLP(y) - z|^2`` through the base model's MLP."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .model import LayerWeights, ModelConfig, activation_grad, mlp_forward, mlp_parts
from .numerics import NumericError

INIT_MODES = ("at_output", "zero", "custom")


@dataclass(frozen=True)
class ReconstructionConfig:
    step: float = 0.1
    max_iters: int = 5000
    loss_tol: float | None = None  # None -> 1e-16 * d
    init_mode: str = "at_output"
    backtrack_factor: float = 0.5

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.loss_tol is not None and not self.loss_tol > 0:
            raise ValueError("loss_tol must be positive")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")

    def tol_for(self, d: int) -> float:
        return self.loss_tol if self.loss_tol is not None else 1e-16 * d

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionConfig":
        return cls(**d)


@dataclass
class ReconstructionResult:
    y_star: np.ndarray
    final_loss: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)  # accepted losses


def mlp_loss_and_grad_rows(w: LayerWeights, cfg: ModelConfig, Y, Z) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``|mlp_forward(y) - z|^2`` and exact gradients, one row per problem."""
    parts = mlp_parts(Y, w, cfg)
    r = parts.out - Z
    loss = np.sum(r * r, axis=1)

    g_out = 2.0 * r
    g_act = g_out @ w.w_down.T
    g_up = g_act * parts.act
    g_gate = g_act * parts.up * activation_grad(parts.gate, cfg.activation)
    g_h = g_gate @ w.w_gate.T + g_up @ w.w_up.T

    # normalization Jacobian: h = (y * gamma) / rho, rho = sqrt(c |y|^2 + eps)
    yv, rho = parts.y, parts.denom
    c = 1.0 / yv.shape[1] if cfg.norm_mode == "mean_normalized" else 1.0
    gg = g_h * w.mlp_norm
    g_y = gg / rho - c * yv * np.sum(gg * yv, axis=1, keepdims=True) / rho**3
    return loss, g_out + g_y


def mlp_loss_and_grad(w: LayerWeights, cfg: ModelConfig, y, z) -> tuple[float, np.ndarray]:
    """``|mlp_forward(y) - z|^2`` and its exact gradient in ``y``."""
    y = np.asarray(y, dtype=np.float64)[None, :]
    z = np.asarray(z, dtype=np.float64)[None, :]
    loss, grad = mlp_loss_and_grad_rows(w, cfg, y, z)
    return float(loss[0]), grad[0]


def mlp_loss(w: LayerWeights, cfg: ModelConfig, y, z) -> float:
    """Reference loss: ``mlp_forward`` on the single row ``y``."""
    r = mlp_forward(np.asarray(y, dtype=np.float64)[None, :], w, cfg)[0] - z
    return float(np.sum(r * r))


def _initial(Z: np.ndarray, rcfg: ReconstructionConfig, Y0) -> np.ndarray:
    if rcfg.init_mode == "at_output":
        return Z.copy()
    if rcfg.init_mode == "zero":
        return np.zeros_like(Z)
    if Y0 is None:
        raise ValueError("init_mode 'custom' needs y0")
    return np.array(np.atleast_2d(Y0), dtype=np.float64)


def invert_rows(w: LayerWeights, cfg: ModelConfig, Z, rcfg: ReconstructionConfig | None = None,
                Y0=None):
    """Independent gradient-descent inversions, one per row of ``Z``.

    Rows share matrix products but nothing else: each keeps its own step
    size, acceptance test and stopping point. A rejected step shrinks that
    row's step by ``backtrack_factor``; an accepted one grows it back toward
    ``rcfg.step``, so every row's accepted losses are non-increasing.

    Returns ``(Y_star, converged_mask, results)``.
    """
    rcfg = rcfg or ReconstructionConfig()
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n, d = Z.shape
    tol = rcfg.tol_for(d)
    Y = _initial(Z, rcfg, Y0)
    loss, grad = mlp_loss_and_grad_rows(w, cfg, Y, Z)
    if not np.all(np.isfinite(loss)):
        raise NumericError("non-finite loss at initialization")
    history = [[float(v)] for v in loss]
    step = np.full(n, rcfg.step)
    iters = np.zeros(n, dtype=np.int64)
    min_step = rcfg.step * 1e-30

    while True:
        active = np.flatnonzero((loss > tol) & (iters < rcfg.max_iters) & (step > min_step))
        if active.size == 0:
            break
        iters[active] += 1
        cand = Y[active] - step[active, None] * grad[active]
        c_loss, c_grad = mlp_loss_and_grad_rows(w, cfg, cand, Z[active])
        good = np.isfinite(c_loss) & (c_loss < loss[active])
        acc, rej = active[good], active[~good]
        Y[acc], loss[acc], grad[acc] = cand[good], c_loss[good], c_grad[good]
        step[acc] = np.minimum(rcfg.step, step[acc] / rcfg.backtrack_factor)
        step[rej] *= rcfg.backtrack_factor
        for i, v in zip(acc, c_loss[good]):
            history[i].append(float(v))

    results = []
    for i in range(n):
        final = mlp_loss(w, cfg, Y[i], Z[i])
        results.append(ReconstructionResult(Y[i].copy(), final, int(iters[i]), final <= tol, history[i]))
    ok = np.array([r.converged for r in results], dtype=bool)
    return Y, ok, results


def invert_mlp(w: LayerWeights, cfg: ModelConfig, z, rcfg: ReconstructionConfig | None = None,
               y0=None) -> ReconstructionResult:
    """Recover ``y`` with ``mlp_forward(y) ~= z`` by backtracking gradient descent.

    Starts from ``z`` itself by default: the residual connection makes the
    MLP a small perturbation of the identity.
    """
    z = np.asarray(z, dtype=np.float64)
    _, _, res = invert_rows(w, cfg, z[None, :], rcfg, None if y0 is None else np.asarray(y0)[None, :])
    return res[0]
