"""Per-layer view of a single run: estimated rank, gap, reconstruction
failures, weight cosine and output norm, one CSV row per layer.

    python scripts/layer_diagnostics.py --config configs/flagship.json --seed 3
"""

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from loratrace.config import load_run_config
from loratrace.experiment import run_trial
from loratrace.tracer import layer_output_norms, probe_set


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/flagship.json")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default="-", help="CSV path, or - for stdout")
    args = ap.parse_args()

    rc = load_run_config(args.config)
    if args.seed is not None:
        rc = replace(rc, seed=args.seed)
    t = run_trial(rc)
    rep = t.report
    norms = layer_output_norms(t.cand, probe_set(t.base, t.base.config.hidden_size))

    fh = sys.stdout if args.out == "-" else open(Path(args.out), "w", newline="")
    w = csv.writer(fh)
    w.writerow(["layer", "rank", "peak_log_ratio", "cycle_ranks", "reconstruction_failures",
                "selected", "cosine", "mean_output_norm"])
    for e, cos, nrm in zip(rep.layers, rep.baseline_similarity, norms):
        w.writerow([e.layer_index, e.rank, f"{e.peak_log_ratio:.3f}",
                    " ".join(str(r) for r in e.cycle_ranks), e.reconstruction_failures,
                    int(e.layer_index in rep.selected_layers), f"{cos:.4f}", f"{nrm:.4f}"])
    if fh is not sys.stdout:
        fh.close()
    print(f"verdict={rep.verdict} aggregate_rank={rep.aggregate_rank} spread={rep.aggregate_spread}",
          file=sys.stderr)


if __name__ == "__main__":
    main()
