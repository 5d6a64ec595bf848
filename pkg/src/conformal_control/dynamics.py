"""Benchmark systems, excitation policies and fixed-step RK4 rollouts.

All right-hand sides are written against ``x[..., i]`` so the same function
evaluates a single state of shape ``(n,)`` or a batch of shape ``(B, n)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DivergenceError, InfeasibleError, SamplingError

G = 9.81

# (state dim, control dim) per system kind
DIMS = {
    "pendulum": (2, 1),
    "acc": (3, 1),
    "dubins": (3, 1),
    "cartpole": (4, 1),
    # test hooks
    "zero": (None, 1),
    "linear": (None, 1),
}

DEFAULT_PARAMS = {
    "pendulum": {"m": 1.0, "L": 1.0, "b": 0.01},
    "acc": {"v0": 15.0, "m": 2000.0, "f0": 0.5, "f1": 5.0, "f2": 1.0},
    "dubins": {"v": 1.0},
    "cartpole": {"M": 1.0, "m": 0.3, "L": 1.0},
    "zero": {"n": 1},
    "linear": {"n": 1, "rate": -1.0, "gain": 0.0},
}

Policy = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class BenchmarkSystem:
    """One of the four benchmark plants (or a test hook) with its parameters."""

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)
    g: float = G

    def __post_init__(self):
        if self.kind not in DIMS:
            raise ContractError(f"unknown system kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        for key in ("m", "L", "M", "v"):
            if key in merged and merged[key] <= 0:
                raise ContractError(f"parameter {key} must be positive")

    @property
    def n(self) -> int:
        n = DIMS[self.kind][0]
        return int(self.params["n"]) if n is None else n

    @property
    def m(self) -> int:
        return DIMS[self.kind][1]

    @property
    def inertia(self) -> float:
        p = self.params
        return p.get("I", p["m"] * p["L"] ** 2 / 3.0)

    def equilibrium(self) -> tuple[np.ndarray, np.ndarray]:
        """Return a known equilibrium state and its holding input."""
        p = self.params
        if self.kind == "acc":
            v0 = p["v0"]
            return np.array([0.0, v0, 20.0]), np.array([p["f0"] + p["f1"] * v0 + p["f2"] * v0**2])
        return np.zeros(self.n), np.zeros(self.m)


def _check_dims(system: BenchmarkSystem, x: np.ndarray, u: np.ndarray):
    if x.shape[-1] != system.n or u.shape[-1] != system.m:
        raise ContractError(
            f"{system.kind}: expected x[..., {system.n}] and u[..., {system.m}], "
            f"got {x.shape} and {u.shape}"
        )


def _rhs(system: BenchmarkSystem, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = system.params
    g = system.g
    u0 = u[..., 0]
    kind = system.kind
    if kind == "pendulum":
        th, thd = x[..., 0], x[..., 1]
        inertia = system.inertia
        thdd = -p["b"] * thd / inertia + p["m"] * g * p["L"] * np.sin(th) / (2 * inertia) - u0 / inertia
        return np.stack([thd, thdd], axis=-1)
    if kind == "acc":
        v, m = x[..., 1], p["m"]
        vdot = -(p["f0"] + p["f1"] * v + p["f2"] * v**2) / m + u0 / m
        return np.stack([v, vdot, p["v0"] - v], axis=-1)
    if kind == "dubins":
        th = x[..., 2]
        return np.stack([p["v"] * np.cos(th), p["v"] * np.sin(th), u0], axis=-1)
    if kind == "cartpole":
        th, zd, thd = x[..., 1], x[..., 2], x[..., 3]
        M, m, L = p["M"], p["m"], p["L"]
        s, c = np.sin(th), np.cos(th)
        den = M + m * s**2
        zdd = (u0 - m * L * thd**2 * s + 0.5 * m * g * np.sin(2 * th)) / den
        thdd = (u0 * c - 0.5 * m * L * thd**2 * np.sin(2 * th) + (m + M) * g * s) / (den * L)
        return np.stack([zd, thd, zdd, thdd], axis=-1)
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "linear":
        return p["rate"] * x + p["gain"] * u
    raise ContractError(kind)


def eval_dynamics(system: BenchmarkSystem, x, u) -> np.ndarray:
    """True vector field f(x, u); broadcasts over leading batch axes."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_dims(system, x, u)
    return _rhs(system, x, u)


@dataclass(frozen=True)
class Trajectory:
    """A rollout on a uniform grid; ``failure`` is set when it ended early."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    true_derivs: np.ndarray
    failure: str | None = None
    failure_time: float | None = None

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def to_csv(self, path=None) -> str:
        n, m = self.states.shape[1], self.controls.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)]
        header += [f"f{i + 1}" for i in range(n)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for k in range(len(self.times)):
            row = np.concatenate([[self.times[k]], self.states[k], self.controls[k], self.true_derivs[k]])
            writer.writerow([format(float(v), ".17g") for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, n: int, m: int) -> "Trajectory":
        rows = np.array([[float(v) for v in r] for r in list(csv.reader(io.StringIO(text)))[1:]])
        rows = rows.reshape(-1, 1 + 2 * n + m)
        return cls(rows[:, 0], rows[:, 1 : 1 + n], rows[:, 1 + n : 1 + n + m], rows[:, 1 + n + m :])


def _grid(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ContractError("T and dt must be positive")
    K = int(round(T / dt))
    if K < 1 or abs(K * dt - T) > 1e-9 * max(1.0, T):
        raise ContractError(f"T={T} is not an integer multiple of dt={dt}")
    return K


def _stage(system, policy, X, t, alive):
    U = np.asarray(policy(X, t), dtype=float).reshape(X.shape[0], system.m)
    # a non-finite stage control poisons only its own row; caught as divergence
    return _rhs(system, X, np.where(alive[:, None], U, 0.0))


def integrate_batch(
    system: BenchmarkSystem, policy: Policy, x0s, T: float, dt: float, hold: str = "zoh"
) -> list[Trajectory]:
    """RK4 rollouts of a batch of initial states under a batched policy.

    ``policy(X, t)`` receives an array of shape ``(B, n)`` and must return
    ``(B, m)``; a non-finite control row marks that trajectory infeasible.
    Failed rows are frozen and returned truncated, with ``failure`` set.

    ``hold="zoh"`` samples the control at the step start and holds it across
    the step. ``hold="stage"`` re-evaluates the policy at every RK stage, so
    a state feedback is integrated as the continuous closed loop.
    """
    if hold not in ("zoh", "stage"):
        raise ContractError(f"unknown hold mode {hold!r}")
    X = np.array(x0s, dtype=float, ndmin=2)
    B, n = X.shape
    if n != system.n:
        raise ContractError(f"initial states have dim {n}, system has {system.n}")
    K = _grid(T, dt)
    times = np.arange(K + 1) * dt
    states = np.full((B, K + 1, n), np.nan)
    controls = np.full((B, K + 1, system.m), np.nan)
    derivs = np.full((B, K + 1, n), np.nan)
    end = np.full(B, K + 1)
    failure: list[str | None] = [None] * B
    failure_time: list[float | None] = [None] * B
    alive = np.ones(B, dtype=bool)
    if not np.all(np.isfinite(X)):
        raise ContractError("initial states must be finite")

    with np.errstate(all="ignore"):
        for k in range(K + 1):
            t = times[k]
            states[:, k] = X
            U = np.asarray(policy(X, t), dtype=float).reshape(B, system.m)
            bad_u = alive & ~np.all(np.isfinite(U), axis=1)
            for i in np.flatnonzero(bad_u):
                failure[i], failure_time[i], end[i] = "infeasible", float(t), k
            alive &= ~bad_u
            U = np.where(alive[:, None], U, 0.0)
            k1 = _rhs(system, X, U)
            controls[:, k] = U
            derivs[:, k] = k1
            if k == K:
                break
            if hold == "zoh":
                k2 = _rhs(system, X + 0.5 * dt * k1, U)
                k3 = _rhs(system, X + 0.5 * dt * k2, U)
                k4 = _rhs(system, X + dt * k3, U)
            else:
                k2 = _stage(system, policy, X + 0.5 * dt * k1, t + 0.5 * dt, alive)
                k3 = _stage(system, policy, X + 0.5 * dt * k2, t + 0.5 * dt, alive)
                k4 = _stage(system, policy, X + dt * k3, t + dt, alive)
            X_new = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            bad_x = alive & ~np.all(np.isfinite(X_new), axis=1)
            for i in np.flatnonzero(bad_x):
                failure[i], failure_time[i], end[i] = "diverged", float(times[k + 1]), k + 1
            alive &= ~bad_x
            X = np.where(alive[:, None], X_new, X)

    return [
        Trajectory(
            times[: end[i]].copy(),
            states[i, : end[i]].copy(),
            controls[i, : end[i]].copy(),
            derivs[i, : end[i]].copy(),
            failure[i],
            failure_time[i],
        )
        for i in range(B)
    ]


def integrate(
    system: BenchmarkSystem, policy: Policy, x0, T: float, dt: float = 0.01, hold: str = "zoh"
) -> Trajectory:
    """Integrate one trajectory; raises on blow-up or an infeasible control."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.n,):
        raise ContractError(f"x0 must have shape ({system.n},)")

    def batched(X, t):
        return np.atleast_1d(policy(X[0], t))[None, :]

    traj = integrate_batch(system, batched, x0[None, :], T, dt, hold)[0]
    if traj.failure == "diverged":
        raise DivergenceError(traj.failure_time)
    if traj.failure == "infeasible":
        raise InfeasibleError(f"no admissible control at t={traj.failure_time:.6g}", traj.states[-1])
    return traj


# --- initial-state sampling -------------------------------------------------


@dataclass(frozen=True)
class LevelSet:
    """States on the ellipsoid x'Px = level."""

    P: np.ndarray
    level: float


@dataclass(frozen=True)
class Box:
    low: Sequence[float]
    high: Sequence[float]


@dataclass(frozen=True)
class SafeSet:
    """Box proposals accepted when ``predicate(x)`` is true."""

    low: Sequence[float]
    high: Sequence[float]
    predicate: Callable[[np.ndarray], bool]
    max_tries: int = 100_000


def sample_initial_states(system: BenchmarkSystem, spec, count: int, seed: int) -> list[np.ndarray]:
    if count < 1:
        raise ContractError("count must be >= 1")
    rng = np.random.default_rng(seed)
    n = system.n
    if isinstance(spec, LevelSet):
        P = np.asarray(spec.P, dtype=float)
        d = rng.standard_normal((count, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        scale = np.sqrt(spec.level / np.einsum("bi,ij,bj->b", d, P, d))
        return list(d * scale[:, None])
    if isinstance(spec, Box):
        low, high = np.asarray(spec.low, float), np.asarray(spec.high, float)
        if low.shape != (n,) or high.shape != (n,):
            raise ContractError("box bounds must match the state dimension")
        return list(rng.uniform(low, high, size=(count, n)))
    if isinstance(spec, SafeSet):
        low, high = np.asarray(spec.low, float), np.asarray(spec.high, float)
        out: list[np.ndarray] = []
        tries = 0
        while len(out) < count:
            if tries >= spec.max_tries:
                raise SamplingError(f"accepted {len(out)}/{count} states after {tries} proposals")
            x = rng.uniform(low, high)
            tries += 1
            if spec.predicate(x):
                out.append(x)
        return out
    raise ContractError(f"unsupported sampling descriptor {spec!r}")


def acc_safe_sampler(T_h: float = 1.0, v_range=(10.0, 18.0), gap_range=(1.0, 15.0)) -> SafeSet:
    """p = 0, v uniform, z uniform on [T_h v + gap_lo, T_h v + gap_hi]."""
    lo = T_h * v_range[0] + gap_range[0]
    hi = T_h * v_range[1] + gap_range[1]

    def inside(x):
        gap = x[2] - T_h * x[1]
        return gap_range[0] <= gap <= gap_range[1]

    return SafeSet((0.0, v_range[0], lo), (0.0, v_range[1], hi), inside)


def dubins_start_sampler() -> Box:
    return Box((-6.0, -2.0, -np.pi / 4), (-4.0, 2.0, np.pi / 4))


# --- excitation -------------------------------------------------------------


@dataclass(frozen=True)
class ExcitationPolicy:
    """u(x, t) = offset + gain (x - x_ref) + sum_j A_j sin(w_j t + phi_j).

    ``amplitudes``, ``freqs`` and ``phases`` have shape ``(m, k)``. The
    sinusoidal part is bounded by ``amplitudes.sum(axis=1)`` <= ``bound``.
    """

    gain: np.ndarray
    x_ref: np.ndarray
    offset: np.ndarray
    amplitudes: np.ndarray
    freqs: np.ndarray
    phases: np.ndarray
    bound: float
    seed: int

    def sinusoid(self, t):
        t = np.asarray(t, dtype=float)[..., None, None]
        return np.sum(self.amplitudes * np.sin(self.freqs * t + self.phases), axis=-1)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        return self.offset + (x - self.x_ref) @ self.gain.T + self.sinusoid(t)


@dataclass(frozen=True)
class ExcitationBatch:
    """Stacked excitation policies applied row-wise to a batch of states."""

    policies: tuple[ExcitationPolicy, ...]

    def __post_init__(self):
        ps = self.policies
        object.__setattr__(self, "_gain", np.stack([p.gain for p in ps]))
        object.__setattr__(self, "_ref", np.stack([p.x_ref for p in ps]))
        object.__setattr__(self, "_off", np.stack([p.offset for p in ps]))
        object.__setattr__(self, "_amp", np.stack([p.amplitudes for p in ps]))
        object.__setattr__(self, "_w", np.stack([p.freqs for p in ps]))
        object.__setattr__(self, "_phi", np.stack([p.phases for p in ps]))

    def __call__(self, X, t):
        fb = np.einsum("bmn,bn->bm", self._gain, X - self._ref)
        return self._off + fb + np.sum(self._amp * np.sin(self._w * t + self._phi), axis=-1)


def _lqr_cartpole(system: BenchmarkSystem) -> np.ndarray:
    from scipy.linalg import solve_continuous_are

    p, g = system.params, system.g
    M, m, L = p["M"], p["m"], p["L"]
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    A[2, 1] = m * g / M
    A[3, 1] = (m + M) * g / (M * L)
    B = np.array([[0.0], [0.0], [1.0 / M], [1.0 / (M * L)]])
    Q = np.diag([1.0, 10.0, 1.0, 1.0])
    R = np.array([[1.0]])
    S = solve_continuous_are(A, B, Q, R)
    return -np.linalg.solve(R, B.T @ S)


# per kind: (amplitude bound, frequency range rad/s)
EXCITATION_DEFAULTS = {
    "pendulum": (6.0, (0.5, 4.0)),
    "acc": (1500.0, (0.2, 1.5)),
    "dubins": (1.2, (0.3, 1.5)),
    "cartpole": (3.0, (0.5, 4.0)),
    "zero": (1.0, (0.5, 2.0)),
    "linear": (1.0, (0.5, 2.0)),
}


def make_excitation(system: BenchmarkSystem, seed: int, bound: float | None = None) -> ExcitationPolicy:
    """Seeded stabilizing feedback plus two bounded sinusoids per input."""
    rng = np.random.default_rng(seed)
    n, m = system.n, system.m
    default_bound, (w_lo, w_hi) = EXCITATION_DEFAULTS[system.kind]
    bound = default_bound if bound is None else float(bound)
    x_ref = np.zeros(n)
    offset = np.zeros(m)
    gain = np.zeros((m, n))
    p = system.params
    if system.kind == "pendulum":
        gain[0] = [8.0, 5.0]
    elif system.kind == "acc":
        x_ref[1] = rng.uniform(12.0, 18.0)
        offset[0] = p["f0"] + p["f1"] * x_ref[1] + p["f2"] * x_ref[1] ** 2
        gain[0, 1] = -0.5 * p["m"]
    elif system.kind == "dubins":
        gain[0, 2] = -0.5
    elif system.kind == "cartpole":
        gain = _lqr_cartpole(system)
    elif system.kind == "linear":
        gain[0, 0] = 0.0
    k = 2
    amplitudes = rng.uniform(0.25, 0.5, size=(m, k)) * bound
    freqs = rng.uniform(w_lo, w_hi, size=(m, k))
    phases = rng.uniform(0.0, 2 * np.pi, size=(m, k))
    return ExcitationPolicy(gain, x_ref, offset, amplitudes, freqs, phases, bound, seed)
