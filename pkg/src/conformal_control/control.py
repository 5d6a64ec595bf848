"""Closed-form single-constraint QPs and the CR-CLF / CR-CBF state feedbacks.

Every solver has a vectorized core over rows ``a: (B, m)``, ``b: (B,)`` so a
policy can be evaluated for a whole batch of rollouts at once. Batched
policies report an empty feasible set as a NaN control row; single-state
calls raise :class:`InfeasibleError` instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .conformal import ConformalQuantile
from .errors import ContractError, InfeasibleError

LE, GE = "le", "ge"


@dataclass(frozen=True)
class AffineConstraint:
    """a.u + b <= 0 (sense 'le') or a.u + b >= 0 (sense 'ge')."""

    a: np.ndarray
    b: float
    sense: str = LE

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if not np.all(np.isfinite(a)) or not np.isfinite(self.b):
            raise ContractError("constraint data must be finite")
        if self.sense not in (LE, GE):
            raise ContractError(f"unknown sense {self.sense!r}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True)
class QPSolution:
    u: np.ndarray
    r: float
    constraint_active: bool
    objective: float


def min_norm_rows(a, b):
    """argmin ||u||^2 s.t. a.u + b <= 0, per row. Returns (u, active, infeasible)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a2 = np.sum(a * a, axis=-1)
    active = b > 0
    infeasible = active & (a2 == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(active & ~infeasible, b / np.where(a2 > 0, a2, 1.0), 0.0)
    return -scale[..., None] * a, active, infeasible


def tracking_rows(a, b, u_ref):
    """argmin ||u - u_ref||^2 s.t. a.u + b >= 0, per row."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    a2 = np.sum(a * a, axis=-1)
    lhs = np.sum(a * u_ref, axis=-1) + b
    active = lhs < 0
    infeasible = active & (a2 == 0)
    scale = np.where(active & ~infeasible, -lhs / np.where(a2 > 0, a2, 1.0), 0.0)
    return u_ref + scale[..., None] * a, active, infeasible


def tracking_slack_rows(a, b, u_ref, lambda_r: float):
    """argmin ||u - u_ref||^2 + lambda_r r s.t. a.u + b >= -r, r >= 0, per row."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    a2 = np.sum(a * a, axis=-1)
    v = -(np.sum(a * u_ref, axis=-1) + b)
    active = v > 0
    full = v / np.where(a2 > 0, a2, 1.0)
    capped = active & ((a2 == 0) | (full > lambda_r / 2.0))
    mu = np.where(active & (a2 > 0), np.minimum(full, lambda_r / 2.0), 0.0)
    u = u_ref + mu[..., None] * a
    # the slack is exactly zero unless the multiplier hits its cap
    r = np.where(capped, np.maximum(0.0, v - mu * a2), 0.0)
    return u, r, active


def _solution(u, r, active, objective) -> QPSolution:
    return QPSolution(np.asarray(u, dtype=float), float(r), bool(active), float(objective))


def solve_min_norm(constraint: AffineConstraint) -> QPSolution:
    if constraint.sense != LE:
        raise ContractError("solve_min_norm expects a 'le' constraint")
    u, active, infeasible = min_norm_rows(constraint.a, constraint.b)
    if infeasible:
        raise InfeasibleError("a = 0 and b > 0: no input satisfies the constraint")
    return _solution(u, 0.0, active, u @ u)


def solve_tracking(constraint: AffineConstraint, u_ref) -> QPSolution:
    if constraint.sense != GE:
        raise ContractError("solve_tracking expects a 'ge' constraint")
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    u, active, infeasible = tracking_rows(constraint.a, constraint.b, u_ref)
    if infeasible:
        raise InfeasibleError("a = 0 and a.u_ref + b < 0: no input satisfies the constraint")
    d = u - u_ref
    return _solution(u, 0.0, active, d @ d)


def solve_tracking_slack(constraint: AffineConstraint, u_ref, lambda_r: float) -> QPSolution:
    if constraint.sense != GE:
        raise ContractError("solve_tracking_slack expects a 'ge' constraint")
    if lambda_r <= 0:
        raise ContractError("lambda_r must be positive")
    u_ref = np.atleast_1d(np.asarray(u_ref, dtype=float))
    u, r, active = tracking_slack_rows(constraint.a, constraint.b, u_ref, lambda_r)
    d = u - u_ref
    return _solution(u, r, active, d @ d + lambda_r * r)


def wrap_to_pi(angle):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), 2 * np.pi)


def _qval(q) -> float:
    return q.q if isinstance(q, ConformalQuantile) else float(q)


@dataclass(frozen=True)
class FeedbackSolve:
    """Per-row QP output of a certificate policy."""

    u: np.ndarray
    r: np.ndarray
    active: np.ndarray
    infeasible: np.ndarray


class _CertificatePolicy:
    def solve(self, X) -> FeedbackSolve:
        raise NotImplementedError

    def __call__(self, x, t: float = 0.0):
        x = np.asarray(x, dtype=float)
        out = self.solve(np.atleast_2d(x))
        U = np.where(out.infeasible[:, None], np.nan, out.u)
        if x.ndim == 1:
            if out.infeasible[0]:
                raise InfeasibleError("certificate QP infeasible", state=x)
            return U[0]
        return U


class CRCLFPolicy(_CertificatePolicy):
    """Min-norm input subject to the (conformally robust) CLF decrease condition.

    With ``lambda_r`` set, the constraint is relaxed by a penalized slack
    ``r >= 0``; ``q = 0`` gives the uncertainty-agnostic controller.
    """

    def __init__(self, V, model, q, lambda_r: float | None = None):
        self.V, self.model, self.q, self.lambda_r = V, model, _qval(q), lambda_r

    def constraint_rows(self, X):
        dV = self.V.grad(X)
        drift, gain = self.model.drift_and_gain(X)
        a = np.einsum("bn,bnm->bm", dV, gain)
        gnorm = np.linalg.norm(dV, axis=-1)
        b = np.einsum("bn,bn->b", dV, drift) + self.V.c3 * self.V.value(X)
        if self.q > 0:
            b = b + gnorm * self.q
        return a, b

    def solve(self, X) -> FeedbackSolve:
        a, b = self.constraint_rows(X)
        if self.lambda_r is None:
            u, active, infeasible = min_norm_rows(a, b)
            return FeedbackSolve(u, np.zeros(len(b)), active, infeasible)
        u, r, active = tracking_slack_rows(-a, -b, np.zeros_like(a), self.lambda_r)
        return FeedbackSolve(u, r, active, np.zeros(len(b), dtype=bool))


class CRCBFPolicy(_CertificatePolicy):
    """Closest input to ``u_ref`` satisfying the (conformally robust) CBF condition."""

    def __init__(self, h, model, q, u_ref: Callable, lambda_r: float | None = None):
        self.h, self.model, self.q, self.u_ref, self.lambda_r = h, model, _qval(q), u_ref, lambda_r

    def constraint_rows(self, X):
        dh = self.h.grad(X)
        drift, gain = self.model.drift_and_gain(X)
        a = np.einsum("bn,bnm->bm", dh, gain)
        b = np.einsum("bn,bn->b", dh, drift) + self.h.gamma * self.h.value(X)
        if self.q > 0:
            b = b - np.linalg.norm(dh, axis=-1) * self.q
        return a, b

    def solve(self, X) -> FeedbackSolve:
        a, b = self.constraint_rows(X)
        ref = np.asarray(self.u_ref(X), dtype=float).reshape(a.shape)
        if self.lambda_r is None:
            u, active, infeasible = tracking_rows(a, b, ref)
            return FeedbackSolve(u, np.zeros(len(b)), active, infeasible)
        u, r, active = tracking_slack_rows(a, b, ref, self.lambda_r)
        return FeedbackSolve(u, r, active, np.zeros(len(b), dtype=bool))


def cr_clf_policy(V, model, q, lambda_r: float | None = None) -> CRCLFPolicy:
    return CRCLFPolicy(V, model, q, lambda_r)


def cr_cbf_policy(h, model, q, u_ref, slack: float | None = None) -> CRCBFPolicy:
    return CRCBFPolicy(h, model, q, u_ref, slack)


def acc_reference(v_desired: float = 20.0, k: float = 100.0):
    """u_ref = k (v_desired - v)."""

    def u_ref(X):
        X = np.asarray(X, dtype=float)
        return (k * (v_desired - X[..., 1]))[..., None]

    return u_ref


def dubins_reference(target=(6.0, 0.0), k: float = 10.0):
    """u_ref = k wrapToPi(atan2(ty - py, tx - px) - theta)."""
    tx, ty = target

    def u_ref(X):
        X = np.asarray(X, dtype=float)
        bearing = np.arctan2(ty - X[..., 1], tx - X[..., 0])
        return (k * wrap_to_pi(bearing - X[..., 2]))[..., None]

    return u_ref


def zero_reference(m: int = 1):
    def u_ref(X):
        return np.zeros(np.shape(X)[:-1] + (m,))

    return u_ref


REFERENCES = {"acc": acc_reference, "dubins": dubins_reference, "zero": zero_reference}

CONTROLLERS = {
    # name: (certificate family, robust, slack)
    "cr-clf-qp": ("clf", True, False),
    "clf-qp": ("clf", False, False),
    "cr-clf-qp-slack": ("clf", True, True),
    "clf-qp-slack": ("clf", False, True),
    "cr-cbf-qp": ("cbf", True, False),
    "cbf-qp": ("cbf", False, False),
    "cr-cbf-qp-slack": ("cbf", True, True),
    "cbf-qp-slack": ("cbf", False, True),
}


def baseline_of(name: str) -> str:
    """Uncertainty-agnostic counterpart of a controller name."""
    return name[3:] if name.startswith("cr-") else name
