"""Trajectory-level nonconformity scores and split conformal quantiles."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ContractError


@dataclass(frozen=True)
class ScoreSet:
    scores: np.ndarray
    source_ids: tuple = ()
    horizon: float | None = None

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float).ravel()
        if s.size == 0:
            raise ContractError("score set is empty")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ContractError("scores must be finite and nonnegative")
        object.__setattr__(self, "scores", s)
        if not self.source_ids:
            object.__setattr__(self, "source_ids", tuple(range(s.size)))

    def __len__(self) -> int:
        return self.scores.size


@dataclass(frozen=True)
class ConformalQuantile:
    q: float
    delta: float
    n_cal: int
    rank: int
    weighted: bool = False

    @property
    def finite(self) -> bool:
        return math.isfinite(self.q)


@dataclass(frozen=True)
class WeightSet:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if np.any(w < 0) or np.any(w > 1):
            raise ContractError("weights must lie in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / (self.weights.sum() + 1.0)

    @property
    def infinity_mass(self) -> float:
        return 1.0 / (self.weights.sum() + 1.0)


@dataclass(frozen=True)
class CoverageDistribution:
    alpha: float
    beta: float
    mean: float
    variance: float
    degenerate: bool = False

    def interval(self, level: float = 0.999) -> tuple[float, float]:
        """Central interval holding ``level`` of the beta law."""
        if self.degenerate:
            return 1.0, 1.0
        tail = (1.0 - level) / 2
        law = stats.beta(self.alpha, self.beta)
        return float(law.ppf(tail)), float(law.ppf(1 - tail))


def _as_scores(scores) -> ScoreSet:
    return scores if isinstance(scores, ScoreSet) else ScoreSet(scores)


def _check_delta(delta: float):
    if not 0 < delta < 1:
        raise ContractError(f"delta must lie in (0, 1), got {delta}")


def conformal_rank(n_cal: int, delta: float) -> int:
    """ceil((1 - delta)(n_cal + 1)), guarded against float round-up."""
    x = (1.0 - delta) * (n_cal + 1)
    k = math.ceil(x)
    if k - x > 1 - 1e-9:
        k -= 1
    return k


def trajectory_score(traj, model) -> float:
    """sup over grid nodes of ||f(x_k, u_k) - f_hat(x_k, u_k)||_2."""
    if len(traj.times) == 0:
        raise ContractError("empty trajectory")
    resid = traj.true_derivs - model.predict(traj.states, traj.controls)
    return float(np.max(np.linalg.norm(resid, axis=-1)))


def split_quantile(scores, delta: float) -> ConformalQuantile:
    s = _as_scores(scores)
    _check_delta(delta)
    n = len(s)
    k = conformal_rank(n, delta)
    q = math.inf if k > n else float(np.sort(s.scores)[k - 1])
    return ConformalQuantile(q, delta, n, k)


def weighted_quantile(scores, weights, delta: float) -> ConformalQuantile:
    """Quantile of sum_i w~_i delta_{s_i} + w~_inf delta_inf at level 1 - delta."""
    s = _as_scores(scores)
    w = weights if isinstance(weights, WeightSet) else WeightSet(weights)
    _check_delta(delta)
    if w.weights.size != len(s):
        raise ContractError("weights and scores differ in length")
    order = np.argsort(s.scores, kind="stable")
    sorted_s = s.scores[order]
    # accumulate unnormalized masses; compare against (1 - delta) * (sum w + 1)
    cum = np.cumsum(w.weights[order])
    target = (1.0 - delta) * (w.weights.sum() + 1.0)
    hit = np.flatnonzero(cum >= target - 1e-9)
    if hit.size == 0:
        return ConformalQuantile(math.inf, delta, len(s), len(s) + 1, weighted=True)
    k = int(hit[0])
    return ConformalQuantile(float(sorted_s[k]), delta, len(s), k + 1, weighted=True)


def coverage_beta(n_cal: int, delta: float) -> CoverageDistribution:
    if n_cal < 1:
        raise ContractError("n_cal must be >= 1")
    _check_delta(delta)
    k = conformal_rank(n_cal, delta)
    if k > n_cal:
        return CoverageDistribution(float(k), float(n_cal + 1 - k), 1.0, 0.0, degenerate=True)
    a, b = float(k), float(n_cal + 1 - k)
    mean = a / (a + b)
    var = a * b / ((a + b) ** 2 * (a + b + 1))
    return CoverageDistribution(a, b, mean, var)


def empirical_coverage(test_scores, q) -> float:
    s = _as_scores(test_scores)
    qv = q.q if isinstance(q, ConformalQuantile) else float(q)
    if math.isinf(qv):
        return 1.0
    return float(np.mean(s.scores <= qv))


def model_hash(model) -> str:
    sparse = getattr(model, "model", model)
    return hashlib.sha256(sparse.to_json().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class CalibrationArtifact:
    quantile: ConformalQuantile
    scores: ScoreSet
    horizon: float
    model_hash: str = ""

    def to_json(self) -> str:
        qv = self.quantile.q
        return json.dumps(
            {
                "delta": self.quantile.delta,
                "n_cal": self.quantile.n_cal,
                "rank_k": self.quantile.rank,
                "q": qv if math.isfinite(qv) else "inf",
                "scores": self.scores.scores.tolist(),
                "weighted": self.quantile.weighted,
                "horizon_T": self.horizon,
                "model_hash": self.model_hash,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibrationArtifact":
        d = json.loads(text)
        q = math.inf if d["q"] == "inf" else float(d["q"])
        quant = ConformalQuantile(q, d["delta"], d["n_cal"], d["rank_k"], d["weighted"])
        return cls(quant, ScoreSet(d["scores"]), d["horizon_T"], d["model_hash"])
