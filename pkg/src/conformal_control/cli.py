"""Command-line entry point: ``conformal-control <command> [flags]``.

Every command rebuilds its upstream stages from the config, which is cheap
and deterministic, then writes its own artifacts under ``--out``.

Exit codes: 0 success, 2 infeasible QP, 3 invalid config or input, 1 other.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ContractError, InfeasibleError
from .harness.config import PRESETS, ExperimentConfig, preset
from .harness.experiment import StageError, coverage_experiment, gen_data, prepare, run_experiment
from .harness.export import export, paired_report

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_INVALID = 0, 1, 2, 3


def load_config(args) -> ExperimentConfig:
    """Preset defaults, then the JSON config file, then command-line overrides."""
    doc: dict = {}
    if args.preset:
        doc.update(preset(args.preset).to_dict())
    if args.config:
        try:
            with open(args.config) as fh:
                doc.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractError(f"cannot read config {args.config}: {exc}") from exc
    if not doc:
        raise ContractError("give --preset and/or --config")
    if args.seed is not None:
        doc["seed"] = args.seed
    if getattr(args, "n_test", None) is not None:
        doc["n_test"] = args.n_test
    if args.out:
        doc["out_dir"] = args.out
    elif not doc.get("out_dir"):
        doc["out_dir"] = os.path.join("runs", doc.get("system", "run"))
    return ExperimentConfig.from_dict(doc)


def _write(path: str, text: str):
    with open(path, "w") as fh:
        fh.write(text)


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    data = gen_data(cfg)
    folder = os.path.join(cfg.out_dir, "data")
    os.makedirs(folder, exist_ok=True)
    for split, ids, trajs in (("train", data.train_ids, data.train), ("cal", data.cal_ids, data.cal)):
        for i, traj in zip(ids, trajs):
            traj.to_csv(os.path.join(folder, f"{split}_{i:04d}.csv"))
    manifest = {"train_ids": data.train_ids, "cal_ids": data.cal_ids, "config": cfg.to_dict()}
    _write(os.path.join(folder, "dataset.json"), json.dumps(manifest, sort_keys=True, indent=1))
    print(f"wrote {len(data.train)} train and {len(data.cal)} cal trajectories to {folder}")
    return EXIT_OK


def cmd_fit(cfg: ExperimentConfig) -> int:
    pipe = prepare(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write(os.path.join(cfg.out_dir, "model.json"), pipe.model.model.to_json())
    nnz = int((pipe.model.model.xi != 0).sum())
    print(f"fitted {nnz} nonzero coefficients over {pipe.model.model.library.M} terms")
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig) -> int:
    pipe = prepare(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write(os.path.join(cfg.out_dir, "model.json"), pipe.model.model.to_json())
    _write(os.path.join(cfg.out_dir, "calibration.json"), pipe.calibration.to_json())
    _write(os.path.join(cfg.out_dir, "certificate.json"), pipe.certificate.to_json())
    q = pipe.calibration.quantile
    print(f"q = {q.q:.6g} (rank {q.rank} of {q.n_cal}, delta {q.delta})")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig) -> int:
    summary = run_experiment(cfg)
    paths = export(summary, cfg.out_dir)
    print(paired_report(summary))
    print(f"wrote {len(paths)} files to {cfg.out_dir}")
    if summary.results[summary.controller].infeasible_count:
        return EXIT_INFEASIBLE
    return EXIT_OK


def cmd_coverage(cfg: ExperimentConfig, n_seeds: int, level: float) -> int:
    report = coverage_experiment(cfg, range(cfg.seed, cfg.seed + n_seeds), level)
    export(report, cfg.out_dir)
    lo, hi = report.interval
    print(f"Beta({report.alpha:g}, {report.beta:g}) mean {report.mean:.4f}, {level:g} interval [{lo:.4f}, {hi:.4f}]")
    for row in report.per_seed:
        print(f"  seed {row['seed']:>4}  q {row['q']}  coverage {row['coverage']:.4f}  inside {row['inside']}")
    print(f"mean coverage {report.mean_coverage:.4f}")
    return EXIT_OK


def cmd_report(out_dir: str) -> int:
    from .harness.experiment import RunSummary

    shown = False
    path = os.path.join(out_dir, "summary.json")
    if os.path.exists(path):
        with open(path) as fh:
            print(paired_report(RunSummary.from_json(fh.read())))
        shown = True
    path = os.path.join(out_dir, "coverage.json")
    if os.path.exists(path):
        with open(path) as fh:
            doc = json.load(fh)
        print(f"coverage: mean {doc['mean_coverage']:.4f} over {len(doc['per_seed'])} seeds, interval {doc['interval']}")
        shown = True
    if not shown:
        raise ContractError(f"no summary.json or coverage.json in {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON document with ExperimentConfig fields")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="conformal-control", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate training and calibration trajectories")
    sub.add_parser("fit", parents=[common], help="fit the sparse dynamics model")
    sub.add_parser("calibrate", parents=[common], help="compute the conformal quantile")
    run = sub.add_parser("run", parents=[common], help="closed-loop CR versus baseline comparison")
    run.add_argument("--n-test", type=int)
    cov = sub.add_parser("coverage", parents=[common], help="Monte-Carlo coverage over seeds")
    cov.add_argument("--n-test", type=int)
    cov.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    cov.add_argument("--level", type=float, default=0.999)
    sub.add_parser("report", parents=[common], help="print the paired report from --out")
    return parser


def _dispatch(args) -> int:
    if args.command == "report":
        if not args.out:
            raise ContractError("report needs --out")
        return cmd_report(args.out)
    cfg = load_config(args)
    if args.command == "gen-data":
        return cmd_gen_data(cfg)
    if args.command == "fit":
        return cmd_fit(cfg)
    if args.command == "calibrate":
        return cmd_calibrate(cfg)
    if args.command == "run":
        return cmd_run(cfg)
    return cmd_coverage(cfg, args.seeds, args.level)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        if isinstance(cause, InfeasibleError):
            return EXIT_INFEASIBLE
        if isinstance(cause, ContractError):
            return EXIT_INVALID
        return EXIT_ERROR
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
