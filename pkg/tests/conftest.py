"""Shared fixtures: planted-truth models built from the known vector fields."""
import numpy as np
import pytest

from conformal_control.dynamics import BenchmarkSystem
from conformal_control.sysid import SparseModel, build_library, extract_affine

# acceptance verdict lines, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def planted(spec, n, coefs, m=1):
    """ControlAffineModel with xi[i, name] = c for each ((i, name), c) in ``coefs``."""
    lib = build_library(spec)
    xi = np.zeros((n, lib.M))
    for (i, name), c in coefs.items():
        xi[i, lib.names.index(name)] = c
    return extract_affine(SparseModel(lib, xi, 0.0, 0.0, 0), m)


PENDULUM_LIB = {"factors": [["1", "u"], ["1", "x1", "x2", "sin(x1)"]]}
ACC_LIB = {"factors": [["1", "u"], ["1", "x1", "x2", "x2^2", "x3"]]}


def pendulum_truth(system=None):
    system = system or BenchmarkSystem("pendulum")
    p, I = system.params, system.inertia
    return planted(
        PENDULUM_LIB,
        2,
        {
            (0, "x2"): 1.0,
            (1, "x2"): -p["b"] / I,
            (1, "sin(x1)"): p["m"] * system.g * p["L"] / (2 * I),
            (1, "u1"): -1.0 / I,
        },
    )


def acc_truth(system=None):
    system = system or BenchmarkSystem("acc")
    p = system.params
    return planted(
        ACC_LIB,
        3,
        {
            (0, "x2"): 1.0,
            (1, "1"): -p["f0"] / p["m"],
            (1, "x2"): -p["f1"] / p["m"],
            (1, "x2^2"): -p["f2"] / p["m"],
            (1, "u1"): 1.0 / p["m"],
            (2, "1"): p["v0"],
            (2, "x2"): -1.0,
        },
    )


@pytest.fixture
def pendulum_model():
    return pendulum_truth()


@pytest.fixture
def acc_model():
    return acc_truth()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
