#!/usr/bin/env python3
"""Run the sparse-signal benchmark (all arms, all seeds) and print a table.

Example:
    python scripts/run_benchmark.py --jobs 8 --out benchmark.json
"""

import argparse
import json
import time

from milpf.benchmark import ARMS, BENCHMARK_SEEDS, run_seed, summarize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="*", default=list(BENCHMARK_SEEDS))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", help="optional JSON summary output path")
    args = ap.parse_args()

    header = f"{'seed':>4}  " + "  ".join(f"{a:>10}" for a in ARMS) + f"  {'loc':>5}  {'wall':>6}"
    print(header)
    results = []
    for seed in args.seeds:
        t0 = time.time()
        r = run_seed(seed, jobs=args.jobs)
        wall = time.time() - t0
        results.append(r)
        row = f"{seed:>4}  " + "  ".join(f"{r.test_auc[a]:>10.4f}" for a in ARMS)
        print(f"{row}  {r.localization_rate:>5.2f}  {wall:>5.0f}s", flush=True)

    summary = summarize(results)
    print(json.dumps(summary, indent=1))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(summary, f, indent=1)


if __name__ == "__main__":
    main()
