import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_control.dynamics import (
    DIMS,
    BenchmarkSystem,
    Box,
    ExcitationBatch,
    LevelSet,
    SafeSet,
    Trajectory,
    acc_safe_sampler,
    dubins_start_sampler,
    eval_dynamics,
    integrate,
    integrate_batch,
    make_excitation,
    sample_initial_states,
)
from conformal_control.errors import ContractError, DivergenceError, InfeasibleError, SamplingError

finite = st.floats(-5, 5, allow_nan=False)


def const(value):
    return lambda x, t: np.array([value], dtype=float)


class TestVectorFields:
    def test_pendulum_equilibrium(self):
        np.testing.assert_array_equal(eval_dynamics(BenchmarkSystem("pendulum"), [0.0, 0.0], [0.0]), [0.0, 0.0])

    def test_pendulum_horizontal(self):
        # m g L sin(pi/2) / (2 I) with I = 1/3
        f = eval_dynamics(BenchmarkSystem("pendulum"), [math.pi / 2, 0.0], [0.0])
        np.testing.assert_allclose(f, [0.0, 14.715], atol=1e-12)

    def test_acc_drag(self):
        f = eval_dynamics(BenchmarkSystem("acc"), [0.0, 15.0, 20.0], [0.0])
        np.testing.assert_allclose(f, [15.0, -0.150250, 0.0], atol=1e-12)

    def test_acc_equilibrium_velocity_and_gap(self):
        # p keeps growing at v0; only v and z are stationary
        system = BenchmarkSystem("acc")
        x, u = system.equilibrium()
        f = eval_dynamics(system, x, u)
        assert f[1] == pytest.approx(0.0, abs=1e-12)
        assert f[2] == 0.0

    @pytest.mark.parametrize("kind", ["pendulum", "cartpole"])
    def test_upright_equilibria(self, kind):
        system = BenchmarkSystem(kind)
        x, u = system.equilibrium()
        np.testing.assert_array_equal(eval_dynamics(system, x, u), np.zeros(system.n))

    def test_cartpole_hand_value(self):
        # theta = pi/2, all rates zero, u = 1: den = M + m
        system = BenchmarkSystem("cartpole")
        f = eval_dynamics(system, [0.0, math.pi / 2, 0.0, 0.0], [1.0])
        den = 1.0 + 0.3
        expected_thdd = (1.0 * math.cos(math.pi / 2) + 1.3 * 9.81) / den
        expected_zdd = (1.0 + 0.5 * 0.3 * 9.81 * math.sin(math.pi)) / den
        np.testing.assert_allclose(f, [0.0, 0.0, expected_zdd, expected_thdd], atol=1e-12)

    @pytest.mark.parametrize("kind", sorted(DIMS))
    def test_dimension_mismatch(self, kind):
        system = BenchmarkSystem(kind)
        with pytest.raises(ContractError):
            eval_dynamics(system, np.zeros(system.n + 1), np.zeros(system.m))
        with pytest.raises(ContractError):
            eval_dynamics(system, np.zeros(system.n), np.zeros(system.m + 1))

    def test_nonpositive_params_rejected(self):
        with pytest.raises(ContractError):
            BenchmarkSystem("pendulum", {"m": 0.0})
        with pytest.raises(ContractError):
            BenchmarkSystem("cartpole", {"L": -1.0})

    @given(st.lists(st.tuples(finite, finite, finite, finite, finite), min_size=1, max_size=8))
    def test_batch_matches_rows(self, rows):
        system = BenchmarkSystem("cartpole")
        arr = np.array(rows)
        X, U = arr[:, :4], arr[:, 4:]
        batch = eval_dynamics(system, X, U)
        for i in range(len(rows)):
            np.testing.assert_array_equal(batch[i], eval_dynamics(system, X[i], U[i]))


class TestIntegrate:
    def test_zero_system_is_constant(self):
        traj = integrate(BenchmarkSystem("zero", {"n": 3}), const(0.0), [1.0, -2.0, 0.5], 1.0, 0.1)
        assert np.all(traj.states == traj.states[0])

    def test_linear_decay(self):
        traj = integrate(BenchmarkSystem("linear"), const(0.0), [1.0], 1.0, 0.001)
        assert traj.states[-1, 0] == pytest.approx(math.exp(-1), abs=1e-6)

    def test_dubins_straight_line(self):
        traj = integrate(BenchmarkSystem("dubins"), const(0.0), [0.0, 0.0, 0.0], 2.0, 0.01)
        np.testing.assert_allclose(traj.states[-1], [2.0, 0.0, 0.0], atol=1e-12)

    def test_rk4_order(self):
        system = BenchmarkSystem("linear")
        err = [abs(integrate(system, const(0.0), [1.0], 1.0, dt).states[-1, 0] - math.exp(-1)) for dt in (0.1, 0.05)]
        assert 12 <= err[0] / err[1] <= 20

    def test_grid(self):
        traj = integrate(BenchmarkSystem("pendulum"), const(0.0), [0.1, 0.0], 5.0, 0.01)
        assert len(traj) == 501
        assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(5.0)
        assert traj.states.shape == (501, 2) and traj.controls.shape == (501, 1)
        np.testing.assert_allclose(np.diff(traj.times), 0.01, atol=1e-12)

    def test_dt_must_divide_horizon(self):
        with pytest.raises(ContractError):
            integrate(BenchmarkSystem("linear"), const(0.0), [1.0], 1.0, 0.3)

    def test_closure_exact(self):
        system = BenchmarkSystem("cartpole")
        policy = make_excitation(system, 7)
        traj = integrate(system, policy, [0.1, 0.05, 0.0, 0.0], 2.0, 0.01)
        np.testing.assert_array_equal(traj.true_derivs, eval_dynamics(system, traj.states, traj.controls))

    def test_divergence_reports_time(self):
        system = BenchmarkSystem("linear", {"rate": 1e4})
        with pytest.raises(DivergenceError) as info:
            integrate(system, const(0.0), [1.0], 1.0, 0.01)
        assert 0 < info.value.time <= 1.0

    def test_infeasible_control(self):
        def policy(x, t):
            return np.array([np.nan]) if t >= 0.5 else np.array([0.0])

        with pytest.raises(InfeasibleError):
            integrate(BenchmarkSystem("linear"), policy, [1.0], 1.0, 0.1)

    def test_batch_truncates_failed_rows(self):
        def policy(X, t):
            U = np.zeros((len(X), 1))
            if t >= 0.3:
                U[1] = np.nan
            return U

        trajs = integrate_batch(BenchmarkSystem("linear"), policy, [[1.0], [2.0]], 1.0, 0.1)
        assert trajs[0].failure is None and len(trajs[0]) == 11
        assert trajs[1].failure == "infeasible" and len(trajs[1]) == 3
        assert trajs[1].failure_time == pytest.approx(0.3)

    def test_batch_matches_single(self):
        system = BenchmarkSystem("pendulum")
        x0s = [[0.3, 0.0], [-0.2, 0.5]]
        trajs = integrate_batch(system, lambda X, t: -X[:, :1], x0s, 1.0, 0.01)
        for x0, traj in zip(x0s, trajs):
            single = integrate(system, lambda x, t: -x[:1], x0, 1.0, 0.01)
            np.testing.assert_array_equal(single.states, traj.states)

    def test_stage_hold_equals_zoh_for_constant_input(self):
        system = BenchmarkSystem("dubins")
        a = integrate(system, const(0.3), [0.0, 0.0, 0.1], 1.0, 0.01, hold="zoh")
        b = integrate(system, const(0.3), [0.0, 0.0, 0.1], 1.0, 0.01, hold="stage")
        np.testing.assert_array_equal(a.states, b.states)

    def test_stage_hold_is_fourth_order_in_closed_loop(self):
        # x' = -2x + u with u = x: closed loop x' = -x
        system = BenchmarkSystem("linear", {"rate": -2.0, "gain": 1.0})
        err = [
            abs(integrate(system, lambda x, t: x, [1.0], 1.0, dt, hold="stage").states[-1, 0] - math.exp(-1))
            for dt in (0.1, 0.05)
        ]
        assert 12 <= err[0] / err[1] <= 20


class TestTrajectoryCsv:
    def test_round_trip_bit_exact(self):
        system = BenchmarkSystem("acc")
        traj = integrate(system, make_excitation(system, 3), [0.0, 14.0, 30.0], 1.0, 0.01)
        text = traj.to_csv()
        assert text.splitlines()[0] == "t,x1,x2,x3,u1,f1,f2,f3"
        back = Trajectory.from_csv(text, 3, 1)
        for name in ("times", "states", "controls", "true_derivs"):
            np.testing.assert_array_equal(getattr(back, name), getattr(traj, name))

    def test_writes_file(self, tmp_path):
        traj = integrate(BenchmarkSystem("linear"), const(0.0), [1.0], 0.1, 0.05)
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        assert path.read_text() == traj.to_csv()


class TestSampling:
    def test_level_set_identity(self):
        xs = sample_initial_states(BenchmarkSystem("pendulum"), LevelSet(np.eye(2), 1.0), 3, 0)
        assert len(xs) == 3
        for x in xs:
            assert np.linalg.norm(x) == pytest.approx(1.0, abs=1e-12)

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
    @settings(max_examples=25)
    def test_level_set_general(self, seed, level):
        P = np.array([[2.0, 0.3], [0.3, 0.5]])
        for x in sample_initial_states(BenchmarkSystem("pendulum"), LevelSet(P, level), 5, seed):
            assert x @ P @ x == pytest.approx(level, rel=1e-10)

    def test_zero_box(self):
        xs = sample_initial_states(BenchmarkSystem("pendulum"), Box([0, 0], [0, 0]), 4, 1)
        assert all(np.all(x == 0) for x in xs)

    def test_box_dimension_checked(self):
        with pytest.raises(ContractError):
            sample_initial_states(BenchmarkSystem("pendulum"), Box([0], [1]), 1, 0)

    def test_acc_safe_set(self):
        xs = sample_initial_states(BenchmarkSystem("acc"), acc_safe_sampler(1.0), 200, 5)
        arr = np.array(xs)
        assert np.all(arr[:, 2] - arr[:, 1] >= 0)
        assert np.all(arr[:, 0] == 0)
        assert np.all((arr[:, 1] >= 10) & (arr[:, 1] <= 18))

    def test_dubins_start(self):
        arr = np.array(sample_initial_states(BenchmarkSystem("dubins"), dubins_start_sampler(), 200, 2))
        assert np.all((arr[:, 0] >= -6) & (arr[:, 0] <= -4))
        assert np.all(np.abs(arr[:, 2]) <= math.pi / 4)

    def test_rejection_budget(self):
        spec = SafeSet([0.0], [1.0], lambda x: False, max_tries=50)
        with pytest.raises(SamplingError):
            sample_initial_states(BenchmarkSystem("linear"), spec, 1, 0)

    def test_count_positive(self):
        with pytest.raises(ContractError):
            sample_initial_states(BenchmarkSystem("linear"), Box([0.0], [1.0]), 0, 0)

    def test_deterministic(self):
        system = BenchmarkSystem("cartpole")
        spec = Box([-1] * 4, [1] * 4)
        a = sample_initial_states(system, spec, 10, 42)
        b = sample_initial_states(system, spec, 10, 42)
        np.testing.assert_array_equal(np.array(a), np.array(b))


class TestExcitation:
    @pytest.mark.parametrize("kind", ["pendulum", "acc", "dubins", "cartpole"])
    def test_same_seed_same_policy(self, kind):
        system = BenchmarkSystem(kind)
        a, b = make_excitation(system, 11), make_excitation(system, 11)
        for name in ("gain", "x_ref", "offset", "amplitudes", "freqs", "phases"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    @given(st.integers(0, 2**32 - 1), st.floats(0, 1000))
    @settings(max_examples=50)
    def test_sinusoid_bounded(self, seed, t):
        for kind in ("pendulum", "acc", "dubins", "cartpole"):
            policy = make_excitation(BenchmarkSystem(kind), seed)
            assert np.all(np.abs(policy.sinusoid(t)) <= policy.bound)

    def test_distinct_seeds_distinct_phases(self):
        system = BenchmarkSystem("pendulum")
        assert not np.array_equal(make_excitation(system, 1).phases, make_excitation(system, 2).phases)

    def test_batch_matches_individual(self):
        system = BenchmarkSystem("acc")
        policies = [make_excitation(system, s) for s in range(3)]
        X = np.array([[0.0, 12.0, 20.0], [0.0, 15.0, 25.0], [0.0, 17.0, 30.0]])
        U = ExcitationBatch(tuple(policies))(X, 0.7)
        for i, p in enumerate(policies):
            np.testing.assert_allclose(U[i], p(X[i], 0.7), rtol=1e-14)
