"""Run configuration for end-to-end experiments (JSON, same dialect as manifests)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .lora import LoraSpec
from .model import ModelConfig
from .numerics import SeededRng
from .obfuscate import ObfuscationSpec
from .tracer import TraceConfig

SEED_STREAM = 9


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VerifyConfig:
    n_multi: int = 8
    seq_len: int = 6
    tol: float = 1e-9


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    lora: LoraSpec
    obfuscation: ObfuscationSpec = field(default_factory=ObfuscationSpec)
    trace: TraceConfig = field(default_factory=TraceConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    seed: int = 0
    output_dir: str = "runs/e2e"
    storage_dtype: str = "f64"
    stress_noise: float = 0.0

    def validate(self) -> "RunConfig":
        self.lora.validate(self.model)
        self.trace.resolve(self.model.hidden_size)
        if self.storage_dtype not in ("f32", "f64"):
            raise RunConfigError(f"unknown storage_dtype {self.storage_dtype!r}")
        if self.stress_noise < 0:
            raise RunConfigError("stress_noise must be >= 0")
        if self.seed < 0:
            raise RunConfigError("seed must be >= 0")
        return self

    def derived_seeds(self) -> dict[str, int]:
        draws = SeededRng(self.seed, stream=SEED_STREAM).generator.integers(0, 2**62, size=4)
        return dict(zip(("model", "lora", "obfuscation", "trace"), (int(v) for v in draws)))

    def resolved(self) -> "RunConfig":
        """Component seeds replaced by ones derived from the master seed."""
        s = self.derived_seeds()
        return replace(
            self,
            lora=replace(self.lora, seed=s["lora"]),
            obfuscation=replace(self.obfuscation, seed=s["obfuscation"]),
            trace=replace(self.trace, seed=s["trace"]).resolve(self.model.hidden_size),
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "lora": self.lora.to_dict(),
            "obfuscation": self.obfuscation.to_dict(),
            "trace": self.trace.to_dict(),
            "verify": {"n_multi": self.verify.n_multi, "seq_len": self.verify.seq_len,
                       "tol": self.verify.tol},
            "seed": self.seed,
            "output_dir": self.output_dir,
            "storage_dtype": self.storage_dtype,
            "stress_noise": self.stress_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"model", "lora", "obfuscation", "trace", "verify", "seed", "output_dir",
                 "storage_dtype", "stress_noise"}
        unknown = set(d) - known
        if unknown:
            raise RunConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "model" not in d or "lora" not in d:
            raise RunConfigError("run config needs 'model' and 'lora' sections")
        try:
            return cls(
                model=ModelConfig.from_dict(d["model"]),
                lora=LoraSpec.from_dict(d["lora"]),
                obfuscation=ObfuscationSpec.from_dict(d.get("obfuscation", {})),
                trace=TraceConfig.from_dict(d.get("trace", {})),
                verify=VerifyConfig(**d.get("verify", {})),
                seed=int(d.get("seed", 0)),
                output_dir=str(d.get("output_dir", "runs/e2e")),
                storage_dtype=d.get("storage_dtype", "f64"),
                stress_noise=float(d.get("stress_noise", 0.0)),
            ).validate()
        except RunConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise RunConfigError(str(exc)) from exc


def load_json(path) -> dict:
    p = Path(path)
    try:
        return json.loads(p.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise RunConfigError(f"{p}: not valid JSON ({exc})") from exc


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(load_json(path))
