"""Regressor libraries and sequentially thresholded least squares (STLSQ).

Library terms are products of atoms ``1``, ``xi``, ``sin(xi)``, ``cos(xi)``
and ``u``/``uj`` with integer powers, written like ``x1^2*cos(x2)*u``. Names
are canonical, so a model file only needs its term names to be rebuilt.
"""
from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConditioningError, ContractError, UnsupportedLibraryError

_ATOM = re.compile(r"^(?:(?P<fn>sin|cos)\(x(?P<fi>\d+)\)|x(?P<xi>\d+)|u(?P<ui>\d*))(?:\^(?P<pow>\d+))?$")


def _parse(name: str) -> dict[tuple[str, int], int]:
    """Parse a product name into {(kind, index): power}; kind in x/sin/cos/u."""
    powers: dict[tuple[str, int], int] = {}
    if name.strip() == "1":
        return powers
    for atom in name.split("*"):
        atom = atom.strip()
        if atom == "1":
            continue
        mt = _ATOM.match(atom)
        if mt is None:
            raise UnsupportedLibraryError(f"cannot parse basis atom {atom!r}")
        if mt["fn"]:
            key = (mt["fn"], int(mt["fi"]))
        elif mt["xi"]:
            key = ("x", int(mt["xi"]))
        else:
            key = ("u", int(mt["ui"] or 1))
        powers[key] = powers.get(key, 0) + int(mt["pow"] or 1)
    return powers


_KIND_ORDER = {"x": 0, "sin": 1, "cos": 2, "u": 3}


def _canonical(powers: Mapping[tuple[str, int], int]) -> str:
    parts = []
    for (kind, idx), p in sorted(powers.items(), key=lambda kv: (_KIND_ORDER[kv[0][0]], kv[0][1])):
        base = f"x{idx}" if kind == "x" else f"{kind}(x{idx})" if kind in ("sin", "cos") else f"u{idx}"
        parts.append(base if p == 1 else f"{base}^{p}")
    return "*".join(parts) if parts else "1"


@dataclass(frozen=True)
class Term:
    name: str
    powers: tuple[tuple[tuple[str, int], int], ...]

    @property
    def control_degree(self) -> int:
        return sum(p for (kind, _), p in self.powers if kind == "u")

    @property
    def control_index(self) -> int | None:
        for (kind, idx), _ in self.powers:
            if kind == "u":
                return idx - 1
        return None


def monomials(n_vars: int, max_degree: int, offset: int = 1) -> list[str]:
    """Monomials in x_offset.. of total degree <= max_degree, graded order.

    Within a degree the first variable's power decreases, e.g. for two
    variables: 1, x1, x2, x1^2, x1*x2, x2^2, x1^3, ...
    """
    out = []
    for deg in range(max_degree + 1):
        for exps in sorted(
            (e for e in itertools.product(range(deg + 1), repeat=n_vars) if sum(e) == deg), reverse=True
        ):
            out.append(_canonical({("x", offset + i): p for i, p in enumerate(exps) if p}))
    return out


PRESETS: dict[str, list[list[str]]] = {
    "pendulum": [["1", "u"], monomials(2, 5)],
    "acc": [["1", "u"], ["1", "x1", "x2", "x3"]],
    "dubins": [["1", "u"], ["1", "x3", "x3^2", "x3^3"]],
    "cartpole": [["1", "u"], ["1", "x3", "x4", "x3^2", "x3*x4", "x4^2"]]
    + [["1", "sin(x2)", "cos(x2)"]] * 4,
}


@dataclass(frozen=True)
class BasisLibrary:
    """Ordered, uniquely named, control-affine basis terms."""

    terms: tuple[Term, ...]
    spec: Mapping = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    def evaluate(self, X, U) -> np.ndarray:
        """Regressor matrix of shape ``(..., M)``."""
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        cache: dict[tuple[str, int], np.ndarray] = {}

        def atom(kind, idx):
            key = (kind, idx)
            if key not in cache:
                if kind == "u":
                    cache[key] = U[..., idx - 1]
                elif kind == "x":
                    cache[key] = X[..., idx - 1]
                else:
                    cache[key] = getattr(np, kind)(X[..., idx - 1])
            return cache[key]

        cols = []
        ones = np.ones(X.shape[:-1])
        for term in self.terms:
            val = ones
            for (kind, idx), p in term.powers:
                a = atom(kind, idx)
                val = val * (a if p == 1 else a**p)
            cols.append(val)
        return np.stack(cols, axis=-1)


def build_library(spec) -> BasisLibrary:
    """Tensor-product library from a preset name or explicit factor lists.

    ``spec`` is ``"pendulum"``, ``{"preset": "acc"}`` or
    ``{"factors": [["1", "u"], ["1", "x1"]]}``. The rightmost factor varies
    fastest; products that reduce to the same canonical name are kept once.
    """
    if isinstance(spec, str):
        spec = {"preset": spec}
    if "preset" in spec:
        if spec["preset"] not in PRESETS:
            raise UnsupportedLibraryError(f"unknown library preset {spec['preset']!r}")
        factors = PRESETS[spec["preset"]]
    else:
        factors = spec.get("factors", [])
    if not factors or any(len(f) == 0 for f in factors):
        raise UnsupportedLibraryError("library needs at least one non-empty factor list")
    parsed = [[_parse(name) for name in f] for f in factors]
    seen: dict[str, Term] = {}
    for combo in itertools.product(*parsed):
        powers: dict[tuple[str, int], int] = {}
        for pw in combo:
            for key, p in pw.items():
                powers[key] = powers.get(key, 0) + p
        if sum(p for (kind, _), p in powers.items() if kind == "u") > 1:
            raise UnsupportedLibraryError("basis term has control degree > 1")
        name = _canonical(powers)
        if name not in seen:
            ordered = sorted(powers.items(), key=lambda kv: (_KIND_ORDER[kv[0][0]], kv[0][1]))
            seen[name] = Term(name, tuple(ordered))
    return BasisLibrary(tuple(seen.values()), dict(spec))


def eval_regressor(lib: BasisLibrary, x, u) -> np.ndarray:
    return lib.evaluate(x, u)


@dataclass(frozen=True)
class SparseModel:
    library: BasisLibrary
    xi: np.ndarray
    threshold: float
    ridge: float
    iterations: int

    @property
    def n(self) -> int:
        return self.xi.shape[0]

    def predict(self, x, u) -> np.ndarray:
        return self.library.evaluate(x, u) @ self.xi.T

    def to_json(self) -> str:
        return json.dumps(
            {
                "library_spec": dict(self.library.spec),
                "term_names": self.library.names,
                "xi": self.xi.tolist(),
                "fit_meta": {"threshold": self.threshold, "ridge": self.ridge, "iterations": self.iterations},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SparseModel":
        doc = json.loads(text)
        lib = build_library(doc["library_spec"])
        if lib.names != doc["term_names"]:
            raise UnsupportedLibraryError("term names do not match the rebuilt library")
        meta = doc["fit_meta"]
        return cls(lib, np.array(doc["xi"], dtype=float), meta["threshold"], meta["ridge"], meta["iterations"])


def _ridge_solve(A: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    k = A.shape[1]
    if k == 0:
        return np.zeros(0)
    if ridge == 0:
        if np.linalg.matrix_rank(A) < k:
            raise ConditioningError("rank-deficient active design; use a ridge penalty > 0")
        return np.linalg.lstsq(A, y, rcond=None)[0]
    A_aug = np.vstack([A, np.sqrt(ridge) * np.eye(k)])
    y_aug = np.concatenate([y, np.zeros(k)])
    return np.linalg.lstsq(A_aug, y_aug, rcond=None)[0]


def stlsq_fit(
    lib: BasisLibrary,
    X,
    U,
    Xdot,
    threshold: float = 0.05,
    ridge: float = 1e-6,
    max_iter: int = 20,
    active=None,
) -> SparseModel:
    """Fit each state row by ridge regression with hard thresholding.

    ``X``, ``U``, ``Xdot`` are stacked samples of shape ``(N, n)``, ``(N, m)``,
    ``(N, n)``. ``active`` optionally restricts the starting support, as an
    ``(n, M)`` boolean mask.
    """
    if threshold < 0 or ridge < 0:
        raise ContractError("threshold and ridge must be nonnegative")
    Theta = lib.evaluate(X, U)
    Y = np.asarray(Xdot, dtype=float)
    N, M = Theta.shape
    if N < M:
        raise ContractError(f"need at least M={M} samples, got {N}")
    n = Y.shape[1]
    xi = np.zeros((n, M))
    iters = 0
    start = np.ones((n, M), dtype=bool) if active is None else np.asarray(active, dtype=bool)
    for i in range(n):
        support = start[i].copy()
        coef = np.zeros(M)
        for it in range(1, max_iter + 1):
            coef = np.zeros(M)
            coef[support] = _ridge_solve(Theta[:, support], Y[:, i], ridge)
            keep = support & (np.abs(coef) >= threshold)
            iters = max(iters, it)
            if np.array_equal(keep, support):
                break
            support = keep
        coef[np.abs(coef) < threshold] = 0.0
        xi[i] = coef
    return SparseModel(lib, xi, threshold, ridge, iters)


@dataclass(frozen=True)
class ControlAffineModel:
    """A sparse model split as drift(x) + gain(x) u."""

    model: SparseModel
    drift_idx: np.ndarray
    gain_idx: np.ndarray
    gain_cols: np.ndarray
    m: int

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def library(self) -> BasisLibrary:
        return self.model.library

    def predict(self, x, u) -> np.ndarray:
        return self.model.predict(x, u)

    def drift_and_gain(self, x) -> tuple[np.ndarray, np.ndarray]:
        """drift(x) of shape ``(..., n)`` and gain(x) of shape ``(..., n, m)``."""
        x = np.asarray(x, dtype=float)
        # with u = 1 every control-degree-1 term reduces to its state factor
        Theta = self.library.evaluate(x, np.ones(x.shape[:-1] + (self.m,)))
        xi = self.model.xi
        drift = Theta[..., self.drift_idx] @ xi[:, self.drift_idx].T
        gain = np.zeros(x.shape[:-1] + (self.n, self.m))
        for j in range(self.m):
            idx = self.gain_idx[self.gain_cols == j]
            gain[..., j] = Theta[..., idx] @ xi[:, idx].T
        return drift, gain

    def drift(self, x) -> np.ndarray:
        return self.drift_and_gain(x)[0]

    def gain(self, x) -> np.ndarray:
        """Input-gain matrix of shape ``(..., n, m)``."""
        return self.drift_and_gain(x)[1]


def extract_affine(model: SparseModel, m: int = 1) -> ControlAffineModel:
    terms = model.library.terms
    if any(t.control_degree > 1 for t in terms):
        raise UnsupportedLibraryError("model is not control-affine")
    drift = np.array([i for i, t in enumerate(terms) if t.control_degree == 0], dtype=int)
    gain = np.array([i for i, t in enumerate(terms) if t.control_degree == 1], dtype=int)
    cols = np.array([terms[i].control_index for i in gain], dtype=int)
    if len(cols) and cols.max() >= m:
        raise UnsupportedLibraryError(f"library references input u{cols.max() + 1} but m={m}")
    return ControlAffineModel(model, drift, gain, cols, m)


def predict(model, x, u) -> np.ndarray:
    return model.predict(x, u)


def stack_trajectories(trajs: Sequence, stride: int = 1):
    """Concatenate (x, u, xdot) samples from trajectories, every ``stride`` node."""
    X = np.concatenate([t.states[::stride] for t in trajs])
    U = np.concatenate([t.controls[::stride] for t in trajs])
    F = np.concatenate([t.true_derivs[::stride] for t in trajs])
    return X, U, F
