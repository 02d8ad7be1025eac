#!/usr/bin/env python3
"""36-run selection experiment: does best-validation-AUC pick a near-best run?

Trains `--runs` independent runs on one benchmark seed and reports the gap
between the validation-selected run's test AUC and the best test AUC seen.

Example:
    python scripts/run_selection_experiment.py --seed 7 --runs 36 --jobs 8
"""

import argparse
from dataclasses import replace

from milpf.benchmark import MIL_CONFIG, benchmark_dataset
from milpf.trainer import multi_run, sweep_summary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7, help="benchmark dataset seed")
    ap.add_argument("--runs", type=int, default=36)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    data, _ = benchmark_dataset(args.seed)
    cfg = replace(MIL_CONFIG, runs=args.runs)
    best, results = multi_run(data, cfg, jobs=args.jobs)

    print(f"{'seed':>5} {'val_auc':>8} {'test_auc':>9} {'best_ep':>7}")
    for r in results:
        mark = " <- selected" if r.seed == best.seed else ""
        print(f"{r.seed:>5} {r.val_auc:>8.4f} {r.test_metrics.auc:>9.4f} "
              f"{r.best_epoch:>7}{mark}")

    max_test = max(r.test_metrics.auc for r in results)
    print(f"\nselected test AUC: {best.test_metrics.auc:.4f}")
    print(f"max test AUC:      {max_test:.4f}")
    print(f"selection gap:     {max_test - best.test_metrics.auc:.4f}")
    for key, value in sweep_summary(results).items():
        print(f"{key}: {value}")


if __name__ == "__main__":
    main()
