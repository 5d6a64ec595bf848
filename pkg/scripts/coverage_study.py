#!/usr/bin/env python3
"""Monte-Carlo check of conformal coverage against its Beta law.

Usage: python scripts/coverage_study.py [--preset pendulum] [--seeds 20] [--n-test 1000] [--out runs/coverage]
"""
import argparse

import numpy as np

from conformal_control.harness import coverage_experiment, export, preset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", default="pendulum")
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--first-seed", type=int, default=0)
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--level", type=float, default=0.999)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()
    cfg = preset(args.preset, n_test=args.n_test)
    rep = coverage_experiment(cfg, seeds=range(args.first_seed, args.first_seed + args.seeds), level=args.level)
    for row in rep.per_seed:
        print(f"seed {row['seed']:>4}  q {row['q']:.5g}  coverage {row['coverage']:.3f}")
    cov = np.array(rep.coverages)
    lo, hi = rep.interval
    print(f"Beta({rep.alpha:g}, {rep.beta:g}): mean {rep.mean:.4f}, {args.level:g} interval [{lo:.3f}, {hi:.3f}]")
    print(f"empirical: mean {cov.mean():.4f}, sd {cov.std(ddof=1) if len(cov) > 1 else 0.0:.4f}, "
          f"outside interval {int(np.sum((cov < lo) | (cov > hi)))}/{len(cov)}")
    if args.out:
        export(rep, args.out)


if __name__ == "__main__":
    main()
