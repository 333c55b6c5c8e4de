"""How the recovered rank degrades when the candidate is not an exact
reparameterization: Gaussian noise of growing size on the attention weights.

    python scripts/noise_stress.py --rank 8 --seeds 5
"""

import argparse
import csv
import sys

from loratrace.config import RunConfig
from loratrace.experiment import run_trial
from loratrace.lora import LoraSpec
from loratrace.model import ModelConfig
from loratrace.obfuscate import ObfuscationSpec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rank", type=int, default=8)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--levels", type=float, nargs="+", default=[0.0, 1e-10, 1e-8, 1e-6, 1e-4])
    args = ap.parse_args()

    model = ModelConfig(64, 176, 8, 256)
    w = csv.writer(sys.stdout)
    w.writerow(["noise_std", "seed", "verdict", "aggregate_rank", "max_peak_log_ratio"])
    for std in args.levels:
        for seed in range(args.seeds):
            rc = RunConfig(model, LoraSpec(args.rank, ("V",)), ObfuscationSpec(), seed=seed, stress_noise=std)
            r = run_trial(rc).report
            peak = max(e.peak_log_ratio for e in r.layers)
            w.writerow([std, seed, r.verdict, r.aggregate_rank, f"{peak:.3f}"])


if __name__ == "__main__":
    main()
