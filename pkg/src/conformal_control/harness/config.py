"""Experiment configuration and the four benchmark presets."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from ..control import CONTROLLERS
from ..dynamics import DIMS
from ..errors import ContractError


@dataclass
class ExperimentConfig:
    system: str
    system_params: dict = field(default_factory=dict)
    T: float = 5.0
    dt: float = 0.01
    n_train: int = 400
    n_cal: int = 100
    n_test: int = 100
    delta: float = 0.1
    delta_r: float = 0.1
    library: dict = field(default_factory=dict)
    threshold: float = 0.05
    ridge: float = 1e-6
    max_iter: int = 20
    train_stride: int = 5
    data_sampler: dict = field(default_factory=dict)
    eval_sampler: dict = field(default_factory=dict)
    excitation_bound: float | None = None
    certificate: dict = field(default_factory=dict)
    controller: str = "cr-clf-qp"
    reference: dict = field(default_factory=dict)
    lambda_r: float = 1e4
    closed_loop_hold: str = "stage"
    calibration_mode: str = "excitation"
    seed: int = 0
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.system not in DIMS:
            raise ContractError(f"unknown system {self.system!r}")
        if not self.T > 0 or not self.dt > 0:
            raise ContractError("T and dt must be positive")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ContractError("dt must divide T")
        for name in ("delta", "delta_r"):
            if not 0 < getattr(self, name) < 1:
                raise ContractError(f"{name} must lie in (0, 1)")
        if self.n_cal < 1 or self.n_train < 1 or self.n_test < 0:
            raise ContractError("n_train, n_cal must be >= 1 and n_test >= 0")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ContractError("seed must be an integer in [0, 2^64)")
        if self.controller not in CONTROLLERS:
            raise ContractError(f"unknown controller {self.controller!r}")
        if self.closed_loop_hold not in ("zoh", "stage"):
            raise ContractError("closed_loop_hold must be 'zoh' or 'stage'")
        if self.calibration_mode not in ("excitation", "recalibrate-closed-loop"):
            raise ContractError(f"unknown calibration mode {self.calibration_mode!r}")
        family = CONTROLLERS[self.controller][0]
        if self.certificate.get("kind") != family:
            raise ContractError(f"controller {self.controller} needs a {family} certificate")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(d)).validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


# Ellipse used to draw pendulum data: the V = 1.3 level set of the quadratic
# CLF for the [8 5] feedback; the learned CLF lands within 1e-3 of it.
PENDULUM_DATA_P = [[0.57575949, 0.02692515], [0.02692515, 0.01842483]]

# LQR gain (Q = diag(1, 10, 1, 1), R = 1) for the upright cartpole, u = K x
CARTPOLE_K = [[1.0, -38.271029, 2.490472, -11.239304]]


PRESETS: dict[str, dict] = {
    "pendulum": dict(
        system="pendulum",
        T=5.0,
        delta=0.1,
        library={"preset": "pendulum"},
        threshold=0.05,
        data_sampler={"kind": "level_set", "P": PENDULUM_DATA_P, "level": 1.3},
        eval_sampler={"kind": "clf_level_set", "level": 1.3},
        certificate={"kind": "clf", "K": [[8.0, 5.0]], "c3": 0.5},
        controller="cr-clf-qp",
    ),
    "acc": dict(
        system="acc",
        T=5.0,
        delta=0.05,
        library={"preset": "acc"},
        threshold=1e-4,
        ridge=1e-9,
        data_sampler={"kind": "acc_safe", "T_h": 1.0},
        eval_sampler={"kind": "acc_safe", "T_h": 1.0},
        certificate={"kind": "cbf", "barrier": "acc", "params": {"T_h": 1.0}, "gamma": 2.0},
        reference={"name": "acc", "params": {"v_desired": 20.0, "k": 100.0}},
        controller="cr-cbf-qp",
    ),
    "dubins": dict(
        system="dubins",
        T=10.0,
        delta=0.1,
        delta_r=0.1,
        library={"preset": "dubins"},
        threshold=0.01,
        data_sampler={"kind": "box", "low": [-6.0, -2.0, -1.2], "high": [-4.0, 2.0, 1.2]},
        eval_sampler={"kind": "dubins_start"},
        certificate={"kind": "cbf", "barrier": "dubins", "params": {"R": 2.0, "kappa": 2.0}, "gamma": 1.0},
        reference={"name": "dubins", "params": {"target": [6.0, 0.0], "k": 10.0}},
        controller="cr-cbf-qp-slack",
        lambda_r=1e4,
    ),
    "cartpole": dict(
        system="cartpole",
        T=5.0,
        delta=0.05,
        delta_r=0.05,
        library={"preset": "cartpole"},
        threshold=0.05,
        train_stride=10,
        data_sampler={"kind": "box", "low": [-0.5, -0.3, -0.5, -0.5], "high": [0.5, 0.3, 0.5, 0.5]},
        eval_sampler={"kind": "clf_level_set", "level": 0.15},
        certificate={"kind": "clf", "K": CARTPOLE_K, "c3": 1.0},
        controller="cr-clf-qp-slack",
        lambda_r=100.0,
    ),
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = copy.deepcopy(PRESETS[name])
    d.update(overrides)
    return ExperimentConfig.from_dict(d)
