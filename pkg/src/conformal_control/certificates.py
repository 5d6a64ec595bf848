"""Quadratic Lyapunov and analytic barrier certificates, their conformally
robust conditions, and finite-horizon envelope checks on trajectories."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .conformal import ConformalQuantile
from .errors import ConditioningError, ContractError, StabilityError

ENVELOPE_SLOP = 1e-9


def solve_lyapunov(A, Q) -> np.ndarray:
    """Solve A'P + PA + Q = 0 through its Kronecker (vectorized) form."""
    A = np.asarray(A, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or Q.shape != (n, n):
        raise ContractError("A and Q must be square and of equal size")
    if not np.allclose(Q, Q.T, atol=1e-12, rtol=0) or np.linalg.eigvalsh(0.5 * (Q + Q.T))[0] <= 0:
        raise ContractError("Q must be symmetric positive definite")
    if np.max(np.linalg.eigvals(A).real) >= 0:
        raise StabilityError("A is not Hurwitz")
    eye = np.eye(n)
    # column-major vec: vec(A'P) = (I kron A') vec(P), vec(PA) = (A' kron I) vec(P)
    L = np.kron(eye, A.T) + np.kron(A.T, eye)
    try:
        p = np.linalg.solve(L, -Q.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("singular Kronecker system") from exc
    P = p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class QuadraticLyapunov:
    """V(x) = x'Px with c1 = lambda_min(P), c2 = lambda_max(P), decay rate c3."""

    P: np.ndarray
    c1: float
    c2: float
    c3: float

    @classmethod
    def from_matrix(cls, P, c3: float) -> "QuadraticLyapunov":
        P = np.asarray(P, dtype=float)
        if not np.allclose(P, P.T, atol=1e-12, rtol=0):
            raise ContractError("P must be symmetric")
        ev = np.linalg.eigvalsh(P)
        if ev[0] <= 0:
            raise ContractError("P must be positive definite")
        if c3 <= 0:
            raise ContractError("c3 must be positive")
        return cls(P, float(ev[0]), float(ev[-1]), float(c3))

    def value(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def grad(self, x) -> np.ndarray:
        return 2.0 * np.asarray(x, dtype=float) @ self.P

    @property
    def rate(self) -> float:
        return self.c3

    def to_json(self) -> str:
        return json.dumps({"kind": "quadratic_lyapunov", "P": self.P.tolist(), "c1": self.c1, "c2": self.c2, "c3": self.c3})


@dataclass(frozen=True)
class BarrierCandidate:
    """h(x) with analytic gradient; safe set is {h >= 0}, class-K term gamma*h."""

    name: str
    h: Callable[[np.ndarray], np.ndarray]
    grad_h: Callable[[np.ndarray], np.ndarray]
    gamma: float
    params: Mapping[str, float] = field(default_factory=dict)

    def value(self, x) -> np.ndarray:
        return self.h(np.asarray(x, dtype=float))

    def grad(self, x) -> np.ndarray:
        return self.grad_h(np.asarray(x, dtype=float))

    @property
    def rate(self) -> float:
        return self.gamma

    def to_json(self) -> str:
        return json.dumps({"kind": "barrier", "name": self.name, "params": dict(self.params), "gamma": self.gamma})


def acc_barrier(T_h: float = 1.0, gamma: float = 2.0) -> BarrierCandidate:
    """h = z - T_h v on the (p, v, z) state."""

    def h(x):
        return x[..., 2] - T_h * x[..., 1]

    def grad_h(x):
        g = np.zeros_like(x)
        g[..., 1] = -T_h
        g[..., 2] = 1.0
        return g

    return BarrierCandidate("acc", h, grad_h, gamma, {"T_h": T_h})


def dubins_barrier(R: float = 2.0, kappa: float = 2.0, gamma: float = 1.0) -> BarrierCandidate:
    """h = px^2 + py^2 - R^2 + kappa (px cos th + py sin th).

    The heading term gives h a nonzero derivative along the yaw-rate input.
    """

    def h(x):
        px, py, th = x[..., 0], x[..., 1], x[..., 2]
        return px**2 + py**2 - R**2 + kappa * (px * np.cos(th) + py * np.sin(th))

    def grad_h(x):
        px, py, th = x[..., 0], x[..., 1], x[..., 2]
        c, s = np.cos(th), np.sin(th)
        return np.stack([2 * px + kappa * c, 2 * py + kappa * s, kappa * (py * c - px * s)], axis=-1)

    return BarrierCandidate("dubins", h, grad_h, gamma, {"R": R, "kappa": kappa})


def constant_barrier(value: float = 1.0, n: int = 1, gamma: float = 1.0) -> BarrierCandidate:
    return BarrierCandidate(
        "constant",
        lambda x: np.full(np.shape(x)[:-1], float(value)),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        gamma,
        {"value": value, "n": n},
    )


BARRIERS = {"acc": acc_barrier, "dubins": dubins_barrier, "constant": constant_barrier}


def barrier_from_json(text: str) -> BarrierCandidate:
    d = json.loads(text)
    return BARRIERS[d["name"]](**d["params"], gamma=d["gamma"])


def certificate_from_json(text: str):
    d = json.loads(text)
    if d["kind"] == "quadratic_lyapunov":
        return QuadraticLyapunov.from_matrix(d["P"], d["c3"])
    return barrier_from_json(text)


def closed_loop_jacobian(model, K, step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian at the origin of x -> f_hat(x, Kx)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    n = model.n
    A = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        fp = model.predict(e, K @ e)
        fm = model.predict(-e, -K @ e)
        A[:, j] = (fp - fm) / (2 * step)
    return A


def make_quadratic_clf(model, K, c3: float, step: float = 1e-5) -> QuadraticLyapunov:
    A = closed_loop_jacobian(model, K, step)
    P = solve_lyapunov(A, c3 * np.eye(model.n))
    return QuadraticLyapunov.from_matrix(P, c3)


def _qval(q) -> float:
    return q.q if isinstance(q, ConformalQuantile) else float(q)


@dataclass(frozen=True)
class CertificateMargin:
    value: float
    gradient_norm: float
    x: np.ndarray
    u: np.ndarray
    q: float


def clf_margin(V: QuadraticLyapunov, model, q, x, u) -> CertificateMargin:
    """dV/dx f_hat(x,u) + c3 V(x) + ||dV/dx|| q; <= 0 means the CR-CLF condition holds."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dV = V.grad(x)
    gnorm = float(np.linalg.norm(dV))
    qv = _qval(q)
    robust = gnorm * qv if gnorm > 0 else 0.0
    val = float(dV @ model.predict(x, u) + V.c3 * V.value(x) + robust)
    return CertificateMargin(val, gnorm, x, u, qv)


def cbf_margin(h: BarrierCandidate, model, q, x, u) -> CertificateMargin:
    """dh/dx f_hat(x,u) + gamma h(x) - ||dh/dx|| q; >= 0 means the CR-CBF condition holds."""
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dh = h.grad(x)
    gnorm = float(np.linalg.norm(dh))
    qv = _qval(q)
    robust = gnorm * qv if gnorm > 0 else 0.0
    val = float(dh @ model.predict(x, u) + h.gamma * h.value(x) - robust)
    return CertificateMargin(val, gnorm, x, u, qv)


def decay_envelope(times, v0: float, rate: float, r_bar: float = 0.0) -> np.ndarray:
    """v0 e^{-rate t} + r_bar (1 - e^{-rate t}) / rate."""
    e = np.exp(-rate * np.asarray(times, dtype=float))
    return v0 * e + (r_bar * (1 - e) / rate if r_bar else 0.0)


def barrier_envelope(times, h0: float, rate: float, r_bar: float = 0.0) -> np.ndarray:
    """h0 e^{-rate t} - r_bar (1 - e^{-rate t}) / rate."""
    e = np.exp(-rate * np.asarray(times, dtype=float))
    return h0 * e - (r_bar * (1 - e) / rate if r_bar else 0.0)


def _nonempty(traj):
    if len(traj.times) == 0:
        raise ContractError("empty trajectory")


def verify_decay(traj, V: QuadraticLyapunov) -> tuple[bool, float]:
    _nonempty(traj)
    vals = V.value(traj.states)
    env = decay_envelope(traj.times, vals[0], V.c3)
    holds = bool(np.all(vals <= env * (1 + ENVELOPE_SLOP)))
    if vals[0] == 0:
        worst = 0.0 if np.all(vals == 0) else math.inf
    else:
        worst = float(np.max(vals / env))
    return holds, worst


def verify_barrier(traj, h: BarrierCandidate) -> tuple[bool, float]:
    _nonempty(traj)
    vals = h.value(traj.states)
    if vals[0] < 0:
        raise ContractError("trajectory starts outside the safe set")
    env = barrier_envelope(traj.times, vals[0], h.gamma)
    holds = bool(np.all(vals >= env - ENVELOPE_SLOP))
    return holds, float(np.min(vals))


def slack_envelope_check(traj, cert, r_bar: float) -> bool:
    """Slack-inflated Lyapunov or slack-deflated barrier envelope, node-wise."""
    if r_bar < 0:
        raise ContractError("r_bar must be nonnegative")
    _nonempty(traj)
    if math.isinf(r_bar):
        return True
    vals = cert.value(traj.states)
    if isinstance(cert, QuadraticLyapunov):
        env = decay_envelope(traj.times, vals[0], cert.c3, r_bar)
        return bool(np.all(vals <= env * (1 + ENVELOPE_SLOP)))
    env = barrier_envelope(traj.times, vals[0], cert.gamma, r_bar)
    return bool(np.all(vals >= env - ENVELOPE_SLOP))
