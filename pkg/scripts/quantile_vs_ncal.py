#!/usr/bin/env python3
"""How the conformal quantile and the CR pass fraction move with the calibration size.

Usage: python scripts/quantile_vs_ncal.py [--preset pendulum] [--n-cal 20 50 100 200] [--n-test 50]
"""
import argparse

from conformal_control.harness import StageError, preset, run_experiment


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="pendulum")
    parser.add_argument("--n-cal", type=int, nargs="+", default=[20, 50, 100, 200])
    parser.add_argument("--n-test", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    print(f"{'n_cal':>6} {'rank':>5} {'q':>10} {'CR pass':>8} {'base pass':>9}")
    for n_cal in args.n_cal:
        cfg = preset(args.preset, n_cal=n_cal, n_test=args.n_test, seed=args.seed)
        try:
            summary = run_experiment(cfg)
        except StageError as exc:
            print(f"{n_cal:>6} {'-':>5} {'inf':>10}   ({exc})")
            continue
        cal = summary.calibration
        cr = summary.results[summary.controller].pass_fraction
        base = summary.results[summary.baseline].pass_fraction
        print(f"{n_cal:>6} {cal['rank_k']:>5} {cal['q']:>10.5g} {cr:>8.2f} {base:>9.2f}")


if __name__ == "__main__":
    main()
