"""Per-layer LoRA rank recovery and the aggregated provenance verdict.

For each layer, single-token probes are pushed through the base model; the
candidate layer is fed the same layer inputs, its intermediate state is
recovered through the base MLP, and the rank of the stacked differences
``Y_base - Y_star`` is read off the largest gap in its singular values.
Random probe subsets are drawn repeatedly and the smallest rank is kept.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .model import LayerWeights, Model, probe_capture, single_token_layer
from .numerics import SeededRng, cosine, singular_values
from .reconstruct import ReconstructionConfig, invert_rows

RNG_STREAM = 5
PARALLEL_COS = 1.0 - 1e-8
SV_FLOOR = 1e-300


class ProbeError(ValueError):
    pass


class IncompatibleModelsError(ValueError):
    pass


@dataclass(frozen=True)
class TraceConfig:
    cycles: int = 16
    subset_size: int | None = None  # None -> d // 2
    ratio_floor: float = math.log(1e3)
    abs_floor: float = 1e-7
    top_fraction: float = 0.10
    probe_count: int | None = None  # None -> d
    rcfg: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    assume_unobfuscated: bool = False
    seed: int = 0

    def resolve(self, d: int) -> "TraceConfig":
        cfg = replace(
            self,
            subset_size=self.subset_size if self.subset_size is not None else d // 2,
            probe_count=self.probe_count if self.probe_count is not None else d,
        )
        if cfg.cycles < 1:
            raise ValueError("cycles must be >= 1")
        if not 1 <= cfg.subset_size <= cfg.probe_count:
            raise ValueError(f"subset_size {cfg.subset_size} not in [1, {cfg.probe_count}]")
        if not 0 < cfg.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")
        return cfg

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["rcfg"] = self.rcfg.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TraceConfig":
        d = dict(d)
        if "rcfg" in d:
            d["rcfg"] = ReconstructionConfig.from_dict(d["rcfg"])
        return cls(**d)


@dataclass
class LayerData:
    layer_index: int
    x_in: np.ndarray
    y_base: np.ndarray
    z_cand: np.ndarray
    y_cand: np.ndarray  # direct capture; only the fast path may read it


@dataclass
class LayerEstimate:
    layer_index: int
    rank: int | None
    peak_log_ratio: float
    spectrum: np.ndarray
    cycle_ranks: list[int | None]
    reconstruction_failures: int = 0
    usable: bool = True

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "rank": self.rank,
            "peak_log_ratio": self.peak_log_ratio,
            "spectrum": [float(v) for v in self.spectrum],
            "cycle_ranks": self.cycle_ranks,
            "reconstruction_failures": self.reconstruction_failures,
            "usable": self.usable,
        }


@dataclass
class TraceReport:
    layers: list[LayerEstimate]
    selected_layers: list[int]
    aggregate_rank: int | None
    aggregate_spread: int | None
    baseline_similarity: list[float]
    config: dict
    timings: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str:
        return "no_delta_detected" if self.aggregate_rank is None else "lora_detected"

    def to_dict(self) -> dict:
        # timings stay out so reports are byte-identical across reruns
        return {
            "verdict": self.verdict,
            "aggregate_rank": self.aggregate_rank,
            "aggregate_spread": self.aggregate_spread,
            "selected_layers": self.selected_layers,
            "layers": [e.to_dict() for e in self.layers],
            "baseline_similarity": self.baseline_similarity,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        with open(out / "spectra.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "index", "singular_value"])
            for e in self.layers:
                for i, v in enumerate(e.spectrum, start=1):
                    w.writerow([e.layer_index, i, repr(float(v))])
        with open(out / "ratios.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "index", "log_ratio"])
            for e in self.layers:
                for i, v in enumerate(log_ratios(e.spectrum), start=1):
                    w.writerow([e.layer_index, i, repr(float(v))])
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2) + "\n")
        return out


def _check_compatible(base: Model, cand: Model):
    if base.config != cand.config:
        raise IncompatibleModelsError("base and candidate configurations differ")


def probe_set(model: Model, count: int) -> np.ndarray:
    """First ``count`` token ids (in id order) whose embeddings are pairwise
    non-parallel and, up to ``d`` of them, linearly independent."""
    cfg = model.config
    if count < 1 or count > cfg.vocab_size:
        raise ProbeError(f"cannot choose {count} probes from a vocabulary of {cfg.vocab_size}")
    d = cfg.hidden_size
    chosen: list[int] = []
    units: list[np.ndarray] = []
    basis = np.zeros((0, d))
    for tok in range(cfg.vocab_size):
        e = model.embedding[tok]
        n = np.linalg.norm(e)
        if n == 0:
            continue
        u = e / n
        if units and np.max(np.abs(np.stack(units) @ u)) >= PARALLEL_COS:
            continue
        if basis.shape[0] < d:
            resid = u - basis.T @ (basis @ u)
            rn = np.linalg.norm(resid)
            if rn < 1e-8:
                continue
            basis = np.vstack([basis, resid / rn])
        chosen.append(tok)
        units.append(u)
        if len(chosen) == count:
            return np.array(chosen)
    raise ProbeError(f"only {len(chosen)} usable probe tokens, need {count}")


def collect_intermediates(base: Model, cand: Model, probes) -> list[LayerData]:
    """Base traces plus the candidate's layer outputs on the base's layer inputs."""
    _check_compatible(base, cand)
    out = []
    for tr in probe_capture(base, probes):
        y_c, z_c = single_token_layer(tr.x_in, cand.layers[tr.layer_index], cand.config)
        out.append(LayerData(tr.layer_index, tr.x_in, tr.y_mid, z_c, y_c))
    return out


def reconstruct_intermediates(base_layer: LayerWeights, cfg, Z_cand, rcfg=None):
    """Invert the base MLP row by row; returns ``(Y_star, converged_mask)``."""
    Y, ok, _ = invert_rows(base_layer, cfg, Z_cand, rcfg)
    return Y, ok


def difference_matrix(Y_base, Y_star, indices, mask=None) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if mask is not None and not np.all(np.asarray(mask)[idx]):
        raise IndexError("difference_matrix asked for a masked (unconverged) row")
    return np.asarray(Y_base)[idx] - np.asarray(Y_star)[idx]


def log_ratios(spectrum) -> np.ndarray:
    s = np.maximum(np.asarray(spectrum, dtype=np.float64), SV_FLOOR)
    return np.log(s[:-1] / s[1:])


def rank_from_spectrum(spectrum, ratio_floor: float = math.log(1e3), abs_floor: float = 1e-7,
                       reference_scale: float = 1.0) -> tuple[int | None, float]:
    """Rank at the largest consecutive log-ratio, or ``None`` for a null/flat spectrum."""
    s = np.asarray(spectrum, dtype=np.float64)
    if s.size < 2:
        return None, 0.0
    if s[0] < abs_floor * reference_scale:
        return None, 0.0
    r = log_ratios(s)
    k = int(np.argmax(r))  # first maximum -> smallest rank on ties
    peak = float(r[k])
    if peak < ratio_floor:
        return None, peak
    return k + 1, peak


def _usable_rows(data: LayerData, tcfg: TraceConfig, base_layer: LayerWeights, model_cfg):
    if tcfg.assume_unobfuscated:
        return data.y_cand, np.ones(len(data.y_cand), dtype=bool)
    return reconstruct_intermediates(base_layer, model_cfg, data.z_cand, tcfg.rcfg)


def run_layer(data: LayerData, tcfg: TraceConfig, Y_star, mask) -> LayerEstimate:
    """``tcfg.cycles`` random subsets -> spectra -> ranks; keep the minimum."""
    usable = np.flatnonzero(mask)
    failures = int(len(mask) - len(usable))
    n = tcfg.subset_size
    if len(usable) < n:
        return LayerEstimate(data.layer_index, None, 0.0, np.zeros(0), [], failures, usable=False)
    ref = float(np.mean(np.linalg.norm(data.y_base, axis=1)))
    root = SeededRng(tcfg.seed, stream=RNG_STREAM).derive(data.layer_index)
    cycles = []
    for c in range(tcfg.cycles):
        idx = np.sort(root.derive(c).generator.choice(usable, size=n, replace=False))
        spec = singular_values(difference_matrix(data.y_base, Y_star, idx))
        rank, peak = rank_from_spectrum(spec, tcfg.ratio_floor, tcfg.abs_floor, ref)
        cycles.append((rank, peak, spec))
    ranks = [c[0] for c in cycles]
    found = [i for i, r in enumerate(ranks) if r is not None]
    if found:
        best = min(found, key=lambda i: (ranks[i], i))
    else:
        best = max(range(len(cycles)), key=lambda i: (cycles[i][1], -i))
    _, peak, spec = cycles[best]
    return LayerEstimate(data.layer_index, ranks[best], peak, spec, ranks, failures)


def _trace_layer(data, tcfg, base_layer, model_cfg) -> LayerEstimate:
    Y_star, mask = _usable_rows(data, tcfg, base_layer, model_cfg)
    return run_layer(data, tcfg, Y_star, mask)


def select_layers(estimates: list[LayerEstimate], top_fraction: float) -> list[int]:
    k = math.ceil(top_fraction * len(estimates) - 1e-12)
    order = sorted(estimates, key=lambda e: (-e.peak_log_ratio, e.layer_index))
    return sorted(e.layer_index for e in order[:max(k, 1)])


def weight_similarity_baseline(base: Model, cand: Model) -> list[float]:
    """Per-layer cosine of the flattened, concatenated attention projections."""
    _check_compatible(base, cand)

    def flat(lw):
        return np.concatenate([lw.w_q.ravel(), lw.w_k.ravel(), lw.w_v.ravel(), lw.w_o.ravel()])

    return [cosine(flat(a), flat(b)) for a, b in zip(base.layers, cand.layers)]


def layer_output_norms(model: Model, probes) -> list[float]:
    return [float(np.mean(np.linalg.norm(tr.z_out, axis=1))) for tr in probe_capture(model, probes)]


def trace(base: Model, cand: Model, tcfg: TraceConfig | None = None, threads: int = 1) -> TraceReport:
    _check_compatible(base, cand)
    cfg = base.config
    tcfg = (tcfg or TraceConfig()).resolve(cfg.hidden_size)
    t0 = time.perf_counter()
    probes = probe_set(base, tcfg.probe_count)
    data = collect_intermediates(base, cand, probes)
    t1 = time.perf_counter()

    def work(ld):
        return _trace_layer(ld, tcfg, base.layers[ld.layer_index], cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            estimates = list(pool.map(work, data))
    else:
        estimates = [work(ld) for ld in data]
    t2 = time.perf_counter()

    selected = select_layers(estimates, tcfg.top_fraction)
    ranks = [estimates[i].rank for i in selected if estimates[i].rank is not None]
    agg = min(ranks) if ranks else None
    spread = (max(ranks) - min(ranks)) if ranks else None
    return TraceReport(
        layers=estimates,
        selected_layers=selected,
        aggregate_rank=agg,
        aggregate_spread=spread,
        baseline_similarity=weight_similarity_baseline(base, cand),
        config={"model": cfg.to_dict(), "trace": tcfg.to_dict(), "probes": [int(p) for p in probes]},
        timings={"collect_s": t1 - t0, "layers_s": t2 - t1},
    )
