#!/usr/bin/env python3
"""Run the standard method comparison and print a table plus JSON.

Usage:
    python3 scripts/run_benchmark.py [--seed 7] [--scenes 15] [--out result.json]

With no arguments this reproduces the reference configuration (seed 7,
15 scenes split 10/2/3, window sizes 20/10/1). Expect roughly 10-20
minutes on a laptop CPU; pass --scenes 4 --quick for a fast sanity run.
"""

from __future__ import annotations

import argparse
import json
import sys

from radargrid.benchmark import BenchmarkConfig, format_benchmark, run_benchmark


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--scenes", type=int, default=15)
    ap.add_argument("--out", type=str, default=None, help="write the JSON result here")
    ap.add_argument(
        "--quick",
        action="store_true",
        help="small network and few epochs; for smoke testing only",
    )
    args = ap.parse_args(argv)

    kwargs = {"seed": args.seed, "n_scenes": args.scenes}
    if args.quick:
        kwargs.update(
            widths=(8, 16),
            epochs_by_k={20: 4, 10: 3, 1: 2},
            train_cap_by_k={20: 12, 10: 12, 1: 24},
            val_cap=6,
        )
    result = run_benchmark(BenchmarkConfig(**kwargs))
    print(format_benchmark(result))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=2, sort_keys=True)
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
