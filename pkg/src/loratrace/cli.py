"""Generate, fine-tune, obfuscate and trace synthetic models from the shell.

Exit codes: 0 success, 1 expectation or equivalence check failed,
2 operational error (bad config, missing files, incompatible models).
Human-readable messages go to stderr; reports go to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import weights_io
from .config import RunConfig, RunConfigError, load_json, load_run_config
from .lora import LoraSpec, LoraSpecError, finetune
from .model import ConfigError, ModelConfig, generate_model
from .obfuscate import FLAGS, ObfuscationError, ObfuscationSpec, add_noise, obfuscate_model, verify_equivalence
from .tracer import (IncompatibleModelsError, ProbeError, TraceConfig, layer_output_norms,
                     probe_set, trace, weight_similarity_baseline)

log = logging.getLogger("loratrace")

EXIT_OK, EXIT_MISMATCH, EXIT_ERROR = 0, 1, 2


class CliError(Exception):
    pass


def _default_threads() -> int:
    return os.cpu_count() or 1


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _check_expectation(rank, args) -> int:
    if getattr(args, "expect_null", False):
        if rank is not None:
            log.error("expected no delta, got rank %s", rank)
            return EXIT_MISMATCH
        log.info("null verdict as expected")
    elif getattr(args, "expect_rank", None) is not None:
        if rank != args.expect_rank:
            log.error("expected rank %s, got %s", args.expect_rank, rank)
            return EXIT_MISMATCH
        log.info("rank %s as expected", rank)
    return EXIT_OK


def _model_config_from_args(args) -> ModelConfig:
    if args.config:
        d = load_json(args.config)
        return ModelConfig.from_dict(d.get("model", d))
    return ModelConfig(
        hidden_size=args.hidden_size, mlp_size=args.mlp_size, num_layers=args.num_layers,
        vocab_size=args.vocab_size, activation=args.activation, norm_mode=args.norm_mode,
    )


def cmd_gen_base(args) -> int:
    cfg = _model_config_from_args(args)
    model = generate_model(cfg, args.seed)
    weights_io.save_model(model, args.out, dtype=args.dtype)
    log.info("wrote base model to %s", args.out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    base = weights_io.load_model(args.base_dir)
    if args.lora:
        d = load_json(args.lora)
        spec = LoraSpec.from_dict(d.get("lora", d))
    else:
        spec = LoraSpec(rank=args.rank, targets=tuple(args.targets), seed=args.seed,
                        scale=args.scale)
    cand = finetune(base, spec)
    weights_io.save_model(cand, args.out, dtype=args.dtype)
    log.info("wrote rank-%d candidate (%s) to %s", spec.rank, "".join(spec.targets) or "-", args.out)
    return EXIT_OK


def cmd_obfuscate(args) -> int:
    model = weights_io.load_model(args.model_dir)
    if args.spec:
        d = load_json(args.spec)
        spec = ObfuscationSpec.from_dict(d.get("obfuscation", d))
    else:
        disabled = set(args.disable or [])
        unknown = disabled - set(FLAGS)
        if unknown:
            raise CliError(f"unknown obfuscation flags: {sorted(unknown)}")
        spec = ObfuscationSpec(**{f: f not in disabled for f in FLAGS},
                               scaling_range=(args.scale_lo, args.scale_hi), seed=args.seed)
    out = obfuscate_model(model, spec)
    if args.stress_noise > 0:
        log.warning("adding noise (std %g): output is no longer function-preserving", args.stress_noise)
        out = add_noise(out, args.stress_noise, spec.seed)
    weights_io.save_model(out, args.out, dtype=args.dtype)
    log.info("wrote obfuscated model to %s", args.out)
    return EXIT_OK


def _verify(a, b, probes: int, n_multi: int, seq_len: int, tol: float) -> dict:
    ids = probe_set(a, min(probes, a.config.vocab_size))
    diff = verify_equivalence(a, b, ids, n_multi=n_multi, seq_len=seq_len)
    return {"max_abs_diff": diff, "tol": tol, "equivalent": diff <= tol,
            "single_token_probes": len(ids), "multi_token_inputs": n_multi}


def cmd_verify_equiv(args) -> int:
    a = weights_io.load_model(args.dir_a)
    b = weights_io.load_model(args.dir_b)
    if a.config != b.config:
        raise IncompatibleModelsError("models have different configurations")
    probes = args.probes if args.probes is not None else a.config.hidden_size
    rep = _verify(a, b, probes, args.n_multi, args.seq_len, args.tol)
    sys.stdout.write(json.dumps(rep, sort_keys=True) + "\n")
    log.info("max |diff| = %.3e (tol %.1e)", rep["max_abs_diff"], args.tol)
    return EXIT_OK if rep["equivalent"] else EXIT_MISMATCH


def _trace_config_from_args(args) -> TraceConfig:
    if args.config:
        d = load_json(args.config)
        tcfg = TraceConfig.from_dict(d.get("trace", d))
    else:
        tcfg = TraceConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.cycles is not None:
        changes["cycles"] = args.cycles
    if args.assume_unobfuscated:
        changes["assume_unobfuscated"] = True
    return replace(tcfg, **changes)


def cmd_trace(args) -> int:
    base = weights_io.load_model(args.base_dir)
    cand = weights_io.load_model(args.cand_dir)
    report = trace(base, cand, _trace_config_from_args(args), threads=args.threads)
    report.write(args.out)
    _log_report(report)
    return _check_expectation(report.aggregate_rank, args)


def _log_report(report) -> None:
    per_layer = " ".join(f"{e.layer_index}:{e.rank if e.rank is not None else '-'}" for e in report.layers)
    log.info("per-layer ranks %s", per_layer)
    log.info("verdict %s, rank %s (spread %s) from layers %s", report.verdict,
             report.aggregate_rank, report.aggregate_spread, report.selected_layers)


def cmd_diag(args) -> int:
    model = weights_io.load_model(args.model_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.similarity:
        other = weights_io.load_model(args.similarity)
        rows = enumerate(weight_similarity_baseline(model, other))
        path, header = out / "similarity.csv", ["layer", "cosine"]
    else:
        count = args.probes if args.probes is not None else model.config.hidden_size
        rows = enumerate(layer_output_norms(model, probe_set(model, count)))
        path, header = out / "norms.csv", ["layer", "mean_output_norm"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, v in rows:
            w.writerow([i, repr(float(v))])
    log.info("wrote %s", path)
    return EXIT_OK


def run_e2e(rc: RunConfig, out: Path, threads: int = 1) -> dict:
    """generate -> finetune -> obfuscate -> verify -> trace; returns the report dict."""
    rc = rc.validate().resolved()
    seeds = rc.derived_seeds()
    out.mkdir(parents=True, exist_ok=True)

    base = generate_model(rc.model, seeds["model"])
    weights_io.save_model(base, out / "base", dtype=rc.storage_dtype)
    cand_star = finetune(weights_io.load_model(out / "base"), rc.lora)
    weights_io.save_model(cand_star, out / "finetuned", dtype=rc.storage_dtype)
    cand = obfuscate_model(weights_io.load_model(out / "finetuned"), rc.obfuscation)
    if rc.stress_noise > 0:
        cand = add_noise(cand, rc.stress_noise, rc.obfuscation.seed)
    weights_io.save_model(cand, out / "candidate", dtype=rc.storage_dtype)

    base = weights_io.load_model(out / "base")
    cand_star = weights_io.load_model(out / "finetuned")
    cand = weights_io.load_model(out / "candidate")
    v = rc.verify
    equiv = _verify(cand_star, cand, rc.model.hidden_size, v.n_multi, v.seq_len, v.tol)
    if not equiv["equivalent"]:
        log.warning("obfuscated candidate differs from its source by %.3e", equiv["max_abs_diff"])

    report = trace(base, cand, rc.trace, threads=threads)
    report.write(out / "trace")
    _log_report(report)
    doc = {"run_config": rc.to_dict(), "derived_seeds": seeds, "equivalence": equiv,
           "trace": report.to_dict()}
    _write_json(out / "report.json", doc)
    return doc


def cmd_e2e(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc = replace(rc, seed=args.seed)
    out = Path(args.out or rc.output_dir)
    doc = run_e2e(rc, out, threads=args.threads)
    return _check_expectation(doc["trace"]["aggregate_rank"], args)


def _add_expect(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--expect-rank", type=int, default=None, help="exit 1 unless this rank is reported")
    g.add_argument("--expect-null", action="store_true", help="exit 1 unless no delta is detected")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loratrace", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-base", help="generate a random base model")
    p.add_argument("--config", help="JSON model config (or run config with a 'model' section)")
    p.add_argument("--hidden-size", type=int, default=64)
    p.add_argument("--mlp-size", type=int, default=176)
    p.add_argument("--num-layers", type=int, default=8)
    p.add_argument("--vocab-size", type=int, default=256)
    p.add_argument("--activation", default="silu")
    p.add_argument("--norm-mode", default="paper_literal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=("f32", "f64"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_base)

    p = sub.add_parser("finetune", help="inject a LoRA delta into a model")
    p.add_argument("base_dir")
    p.add_argument("--lora", help="JSON LoRA spec (or run config with a 'lora' section)")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--targets", nargs="*", default=["V"], choices=("Q", "K", "V", "O"))
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=("f32", "f64"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("obfuscate", help="apply function-preserving obfuscation")
    p.add_argument("model_dir")
    p.add_argument("--spec", help="JSON obfuscation spec (or run config with an 'obfuscation' section)")
    p.add_argument("--disable", nargs="*", metavar="FLAG", help=f"turn off any of: {', '.join(FLAGS)}")
    p.add_argument("--scale-lo", type=float, default=0.5)
    p.add_argument("--scale-hi", type=float, default=2.0)
    p.add_argument("--stress-noise", type=float, default=0.0,
                   help="additive Gaussian noise on attention weights (breaks equivalence)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", default="f64", choices=("f32", "f64"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("verify-equiv", help="compare two models' outputs")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.add_argument("--probes", type=int, default=None, help="single-token probes (default: d)")
    p.add_argument("--n-multi", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=6)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_verify_equiv)

    p = sub.add_parser("trace", help="estimate the LoRA rank separating candidate from base")
    p.add_argument("base_dir")
    p.add_argument("cand_dir")
    p.add_argument("--config", help="JSON trace config (or run config with a 'trace' section)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--cycles", type=int, default=None)
    p.add_argument("--assume-unobfuscated", action="store_true")
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--out", required=True)
    _add_expect(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("diag", help="layer output norms or weight-similarity CSV")
    p.add_argument("model_dir")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--norms", action="store_true", help="mean L2 norm of layer outputs (default)")
    g.add_argument("--similarity", metavar="OTHER_DIR", help="per-layer attention weight cosine")
    p.add_argument("--probes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("e2e", help="full pipeline from one run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--out", default=None, help="override output_dir")
    p.add_argument("--threads", type=int, default=_default_threads())
    _add_expect(p)
    p.set_defaults(func=cmd_e2e)
    return ap


OPERATIONAL_ERRORS = (
    OSError, CliError, ConfigError, RunConfigError, LoraSpecError, ObfuscationError,
    weights_io.FormatError, IncompatibleModelsError, ProbeError, ValueError, KeyError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OPERATIONAL_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
