"""In-memory version of the e2e pipeline, for sweeps that don't need files."""

from __future__ import annotations

import time
from dataclasses import dataclass

from .config import RunConfig
from .lora import finetune
from .model import Model, generate_model
from .obfuscate import add_noise, obfuscate_model
from .tracer import TraceReport, trace


@dataclass
class Trial:
    base: Model
    cand_star: Model
    cand: Model
    report: TraceReport
    seconds: float


def build_models(rc: RunConfig) -> tuple[Model, Model, Model]:
    """``(base, finetuned, candidate)`` from the master seed, same derivation as e2e."""
    rc = rc.validate().resolved()
    base = generate_model(rc.model, rc.derived_seeds()["model"])
    cand_star = finetune(base, rc.lora)
    cand = obfuscate_model(cand_star, rc.obfuscation)
    if rc.stress_noise > 0:
        cand = add_noise(cand, rc.stress_noise, rc.obfuscation.seed)
    return base, cand_star, cand


def run_trial(rc: RunConfig, threads: int = 1) -> Trial:
    t0 = time.perf_counter()
    base, cand_star, cand = build_models(rc)
    report = trace(base, cand, rc.resolved().trace, threads=threads)
    return Trial(base, cand_star, cand, report, time.perf_counter() - t0)
