"""Pipeline stages: data generation, fitting, calibration, closed-loop runs."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import certificates as cert_mod
from ..certificates import QuadraticLyapunov, barrier_envelope, decay_envelope
from ..conformal import (
    CalibrationArtifact,
    ScoreSet,
    coverage_beta,
    empirical_coverage,
    model_hash,
    split_quantile,
    trajectory_score,
)
from ..control import CONTROLLERS, REFERENCES, CRCBFPolicy, CRCLFPolicy, baseline_of, zero_reference
from ..dynamics import (
    BenchmarkSystem,
    Box,
    ExcitationBatch,
    LevelSet,
    Trajectory,
    acc_safe_sampler,
    dubins_start_sampler,
    integrate_batch,
    make_excitation,
    sample_initial_states,
)
from ..errors import ContractError, DivergenceError
from ..sysid import ControlAffineModel, build_library, extract_affine, stack_trajectories, stlsq_fit
from .config import ExperimentConfig

# stream ids for derived seeds
DATA_INIT, DATA_EXCITE, TEST_INIT, TEST_EXCITE, EVAL_INIT, VIOL_INIT, RECAL_INIT = range(1, 8)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"[{stage}] {exc}")
        self.__cause__ = exc


def derive_seed(seed: int, stream: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


def system_of(config: ExperimentConfig) -> BenchmarkSystem:
    return BenchmarkSystem(config.system, config.system_params)


def sampler_from(desc: dict, V: QuadraticLyapunov | None = None):
    kind = desc.get("kind")
    if kind == "level_set":
        return LevelSet(np.asarray(desc["P"], dtype=float), float(desc["level"]))
    if kind == "clf_level_set":
        if V is None:
            raise ContractError("clf_level_set sampling needs a quadratic certificate")
        return LevelSet(V.P, float(desc["level"]))
    if kind == "box":
        return Box(desc["low"], desc["high"])
    if kind == "acc_safe":
        return acc_safe_sampler(desc.get("T_h", 1.0))
    if kind == "dubins_start":
        return dubins_start_sampler()
    raise ContractError(f"unknown sampler kind {kind!r}")


@dataclass
class Dataset:
    train: list[Trajectory]
    cal: list[Trajectory]
    train_ids: list[int]
    cal_ids: list[int]


def excitation_rollouts(config: ExperimentConfig, count: int, init_stream: int, excite_stream: int) -> list[Trajectory]:
    system = system_of(config)
    x0s = sample_initial_states(system, sampler_from(config.data_sampler), count, derive_seed(config.seed, init_stream))
    policies = tuple(
        make_excitation(system, derive_seed(config.seed, excite_stream, i), config.excitation_bound) for i in range(count)
    )
    trajs = integrate_batch(system, ExcitationBatch(policies), x0s, config.T, config.dt, hold="zoh")
    for t in trajs:
        if t.failure:
            raise DivergenceError(t.failure_time, f"excitation rollout {t.failure} at t={t.failure_time}")
    return trajs


def gen_data(config: ExperimentConfig) -> Dataset:
    trajs = excitation_rollouts(config, config.n_train + config.n_cal, DATA_INIT, DATA_EXCITE)
    ids = list(range(len(trajs)))
    return Dataset(trajs[: config.n_train], trajs[config.n_train :], ids[: config.n_train], ids[config.n_train :])


def fit_model(config: ExperimentConfig, train: list[Trajectory]) -> ControlAffineModel:
    X, U, F = stack_trajectories(train, config.train_stride)
    lib = build_library(config.library)
    sparse = stlsq_fit(lib, X, U, F, config.threshold, config.ridge, config.max_iter)
    return extract_affine(sparse, system_of(config).m)


def calibrate(config: ExperimentConfig, model, cal: list[Trajectory], delta: float | None = None) -> CalibrationArtifact:
    scores = ScoreSet([trajectory_score(t, model) for t in cal], horizon=config.T)
    q = split_quantile(scores, config.delta if delta is None else delta)
    return CalibrationArtifact(q, scores, config.T, model_hash(model))


def build_certificate(config: ExperimentConfig, model):
    spec = config.certificate
    if spec["kind"] == "clf":
        return cert_mod.make_quadratic_clf(model, spec["K"], spec["c3"])
    if spec["kind"] == "cbf":
        factory = cert_mod.BARRIERS[spec["barrier"]]
        return factory(**spec.get("params", {}), gamma=spec["gamma"])
    raise ContractError(f"unknown certificate kind {spec['kind']!r}")


def reference_of(config: ExperimentConfig):
    ref = config.reference
    if not ref:
        return zero_reference(system_of(config).m)
    return REFERENCES[ref["name"]](**ref.get("params", {}))


def build_policy(config: ExperimentConfig, name: str, cert, model, q: float):
    family, robust, slack = CONTROLLERS[name]
    q_used = q if robust else 0.0
    lam = config.lambda_r if slack else None
    if family == "clf":
        return CRCLFPolicy(cert, model, q_used, lam)
    return CRCBFPolicy(cert, model, q_used, reference_of(config), lam)


def closed_loop(config: ExperimentConfig, policy, x0s) -> list[Trajectory]:
    return integrate_batch(system_of(config), policy, x0s, config.T, config.dt, hold=config.closed_loop_hold)


def eval_initial_states(config: ExperimentConfig, cert, count: int, stream: int = EVAL_INIT) -> list[np.ndarray]:
    if count == 0:
        return []
    V = cert if isinstance(cert, QuadraticLyapunov) else None
    sampler = sampler_from(config.eval_sampler, V)
    return sample_initial_states(system_of(config), sampler, count, derive_seed(config.seed, stream))


def sup_violation(policy, traj: Trajectory) -> float:
    return float(np.max(policy.solve(traj.states).r))


def calibrate_violations(cert, model, q: float, controller: str, config: ExperimentConfig):
    """Split-CP quantile (level 1 - delta_r) of per-rollout sup slack r(x_t)."""
    if not CONTROLLERS[controller][2]:
        raise ContractError(f"controller {controller} has no slack variable")
    policy = build_policy(config, controller, cert, model, q)
    x0s = eval_initial_states(config, cert, config.n_cal, VIOL_INIT)
    trajs = closed_loop(config, policy, x0s)
    violations = ScoreSet([sup_violation(policy, t) for t in trajs], horizon=config.T)
    art = CalibrationArtifact(split_quantile(violations, config.delta_r), violations, config.T, model_hash(model))
    return art.quantile.q, art


def recalibrate_closed_loop(config: ExperimentConfig, model, cert, q0: float) -> CalibrationArtifact:
    """Scores from closed-loop rollouts of the deployed controller built with q0."""
    policy = build_policy(config, config.controller, cert, model, q0)
    trajs = closed_loop(config, policy, eval_initial_states(config, cert, config.n_cal, RECAL_INIT))
    trajs = [t for t in trajs if len(t) > 0]
    return calibrate(config, model, trajs)


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "inf" if x > 0 else "-inf"
    return x


def _unfinite(x):
    return {"inf": math.inf, "-inf": -math.inf}.get(x, x) if isinstance(x, str) else x


@dataclass
class TrajectoryRecord:
    traj_id: int
    x0: list
    passed: bool
    worst: float
    failure: str | None = None
    failure_time: float | None = None
    sup_slack: float = 0.0
    min_barrier: float | None = None
    max_abs_heading: float | None = None

    def to_dict(self) -> dict:
        return {
            "traj_id": self.traj_id,
            "x0": self.x0,
            "pass": self.passed,
            "worst": _finite(self.worst),
            "failure": self.failure,
            "failure_time": self.failure_time,
            "sup_slack": _finite(self.sup_slack),
            "min_barrier": self.min_barrier,
            "max_abs_heading": self.max_abs_heading,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls(
            d["traj_id"], d["x0"], d["pass"], _unfinite(d["worst"]), d["failure"], d["failure_time"],
            _unfinite(d["sup_slack"]), d["min_barrier"], d.get("max_abs_heading"),
        )


@dataclass
class ControllerResult:
    name: str
    q: float
    r_bar: float | None
    records: list[TrajectoryRecord]
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    @property
    def pass_fraction(self) -> float:
        return sum(r.passed for r in self.records) / len(self.records) if self.records else 0.0

    @property
    def infeasible_count(self) -> int:
        return sum(r.failure == "infeasible" for r in self.records)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "q": _finite(self.q),
            "r_bar": _finite(self.r_bar) if self.r_bar is not None else None,
            "pass_fraction": self.pass_fraction,
            "infeasible_count": self.infeasible_count,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerResult":
        r_bar = _unfinite(d["r_bar"]) if d["r_bar"] is not None else None
        return cls(d["name"], _unfinite(d["q"]), r_bar, [TrajectoryRecord.from_dict(r) for r in d["records"]])


@dataclass
class RunSummary:
    config: dict
    calibration: dict
    results: dict[str, ControllerResult]
    certificate: dict

    @property
    def controller(self) -> str:
        return self.config["controller"]

    @property
    def baseline(self) -> str:
        return baseline_of(self.config["controller"])

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "calibration": self.calibration,
            "certificate": self.certificate,
            "results": {k: v.to_dict() for k, v in sorted(self.results.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        d = json.loads(text)
        results = {k: ControllerResult.from_dict(v) for k, v in d["results"].items()}
        return cls(d["config"], d["calibration"], results, d["certificate"])


def _verdict(cert, traj: Trajectory, r_bar: float | None, T: float, dt: float):
    """Envelope verdict over the full horizon; truncated rollouts fail."""
    complete = traj.failure is None and len(traj) == int(round(T / dt)) + 1
    if isinstance(cert, QuadraticLyapunov):
        if r_bar is None:
            holds, worst = cert_mod.verify_decay(traj, cert)
        else:
            holds = cert_mod.slack_envelope_check(traj, cert, r_bar)
            vals = cert.value(traj.states)
            env = decay_envelope(traj.times, vals[0], cert.c3, r_bar)
            worst = float(np.max(vals / env)) if vals[0] > 0 else 0.0
        return holds and complete, worst, None
    vals = cert.value(traj.states)
    if r_bar is None:
        holds, min_h = cert_mod.verify_barrier(traj, cert)
        env = barrier_envelope(traj.times, vals[0], cert.gamma)
    else:
        holds = cert_mod.slack_envelope_check(traj, cert, r_bar)
        env = barrier_envelope(traj.times, vals[0], cert.gamma, r_bar)
        min_h = float(np.min(vals))
    return holds and complete, float(np.min(vals - env)), min_h


def evaluate_controller(config, name, cert, model, q, x0s, r_bar=None) -> ControllerResult:
    policy = build_policy(config, name, cert, model, q)
    trajs = closed_loop(config, policy, x0s) if len(x0s) else []
    slack = CONTROLLERS[name][2]
    records = []
    for i, (x0, traj) in enumerate(zip(x0s, trajs)):
        passed, worst, min_h = _verdict(cert, traj, r_bar if slack else None, config.T, config.dt)
        sup_r = sup_violation(policy, traj) if slack and len(traj) else 0.0
        # the Dubins heading bound |theta| < pi/2 is monitored, not certified
        heading = float(np.max(np.abs(traj.states[:, 2]))) if config.system == "dubins" and len(traj) else None
        records.append(
            TrajectoryRecord(
                i, [float(v) for v in x0], bool(passed), worst, traj.failure, traj.failure_time, sup_r, min_h, heading
            )
        )
    q_used = q if CONTROLLERS[name][1] else 0.0
    return ControllerResult(name, q_used, r_bar if slack else None, records, trajs)


@dataclass
class Pipeline:
    """Artifacts of the data -> fit -> calibrate stages."""

    dataset: Dataset
    model: ControlAffineModel
    calibration: CalibrationArtifact
    certificate: object


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc


def prepare(config: ExperimentConfig) -> Pipeline:
    config.validate()
    data = _stage("gen-data", gen_data, config)
    model = _stage("fit", fit_model, config, data.train)
    art = _stage("calibrate", calibrate, config, model, data.cal)
    cert = _stage("certificate", build_certificate, config, model)
    if config.calibration_mode == "recalibrate-closed-loop":
        art = _stage("calibrate", recalibrate_closed_loop, config, model, cert, art.quantile.q)
    return Pipeline(data, model, art, cert)


def run_experiment(config: ExperimentConfig, pipeline: Pipeline | None = None) -> RunSummary:
    """Paired closed-loop evaluation of the CR controller and its baseline."""
    pipe = pipeline or prepare(config)
    cert, model, q = pipe.certificate, pipe.model, pipe.calibration.quantile.q
    if not math.isfinite(q):
        raise StageError("calibrate", ContractError("conformal quantile is infinite; increase n_cal"))
    x0s = _stage("run", eval_initial_states, config, cert, config.n_test)
    results = {}
    for name in (config.controller, baseline_of(config.controller)):
        r_bar = None
        if CONTROLLERS[name][2]:
            r_bar, _ = _stage("calibrate-violations", calibrate_violations, cert, model, q, name, config)
        results[name] = _stage("run", evaluate_controller, config, name, cert, model, q, x0s, r_bar)
    calib = json.loads(pipe.calibration.to_json())
    calib.pop("scores")
    calib["mode"] = config.calibration_mode
    if CONTROLLERS[config.controller][2]:
        calib["joint_coverage"] = (1 - config.delta) * (1 - config.delta_r)
    return RunSummary(config.to_dict(), calib, results, json.loads(cert.to_json()))


@dataclass
class CoverageReport:
    per_seed: list[dict]
    alpha: float
    beta: float
    mean: float
    interval: tuple[float, float]
    level: float

    @property
    def coverages(self) -> list[float]:
        return [s["coverage"] for s in self.per_seed]

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.coverages))

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_seed": self.per_seed,
                "beta": {"alpha": self.alpha, "beta": self.beta, "mean": self.mean},
                "interval": list(self.interval),
                "level": self.level,
                "mean_coverage": self.mean_coverage,
            },
            sort_keys=True,
            indent=1,
        )


def coverage_experiment(config: ExperimentConfig, seeds=None, level: float = 0.999) -> CoverageReport:
    """Calibrate on n_cal scores, then score n_test fresh rollouts, per seed."""
    seeds = [config.seed] if seeds is None else list(seeds)
    law = coverage_beta(config.n_cal, config.delta)
    lo, hi = law.interval(level)
    rows = []
    for s in seeds:
        cfg = config.replace(seed=int(s))
        data = _stage("gen-data", gen_data, cfg)
        model = _stage("fit", fit_model, cfg, data.train)
        art = _stage("calibrate", calibrate, cfg, model, data.cal)
        test = _stage("coverage", excitation_rollouts, cfg, cfg.n_test, TEST_INIT, TEST_EXCITE)
        test_scores = ScoreSet([trajectory_score(t, model) for t in test])
        cov = empirical_coverage(test_scores, art.quantile)
        rows.append(
            {"seed": int(s), "q": _finite(art.quantile.q), "coverage": cov, "inside": bool(lo <= cov <= hi)}
        )
    return CoverageReport(rows, law.alpha, law.beta, law.mean, (lo, hi), level)
