#!/usr/bin/env python3
"""Run the paired CR vs baseline experiment on every preset and export the results.

Usage: python scripts/run_presets.py [--out runs] [--n-test 100] [--seed 0] [preset ...]
"""
import argparse
import os
import time

from conformal_control.harness import PRESETS, export, paired_report, preset, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("presets", nargs="*", default=sorted(PRESETS))
    parser.add_argument("--out", default="runs")
    parser.add_argument("--n-test", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for name in args.presets:
        start = time.perf_counter()
        summary = run_experiment(preset(name, n_test=args.n_test, seed=args.seed))
        folder = os.path.join(args.out, name)
        export(summary, folder)
        print(paired_report(summary))
        print(f"wrote {folder} in {time.perf_counter() - start:.1f} s\n")


if __name__ == "__main__":
    main()
