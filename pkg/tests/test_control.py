import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conformal_control.certificates import (
    QuadraticLyapunov,
    acc_barrier,
    cbf_margin,
    make_quadratic_clf,
    verify_barrier,
)
from conformal_control.control import (
    CONTROLLERS,
    AffineConstraint,
    CRCLFPolicy,
    acc_reference,
    baseline_of,
    cr_cbf_policy,
    cr_clf_policy,
    dubins_reference,
    solve_min_norm,
    solve_tracking,
    solve_tracking_slack,
    wrap_to_pi,
    zero_reference,
)
from conformal_control.dynamics import BenchmarkSystem, acc_safe_sampler, integrate_batch, sample_initial_states
from conformal_control.errors import ContractError, InfeasibleError

from conftest import planted
from oracles import qp_grid_errors

coef = st.floats(-3, 3, allow_nan=False)


class TestClosedForms:
    def test_min_norm_idle(self):
        sol = solve_min_norm(AffineConstraint([2.0], -1.0))
        assert sol.u[0] == 0.0 and not sol.constraint_active

    def test_min_norm_scalar(self):
        sol = solve_min_norm(AffineConstraint([2.0], 1.0))
        assert sol.u[0] == pytest.approx(-0.5) and sol.constraint_active
        assert 2 * sol.u[0] + 1 == pytest.approx(0.0)

    def test_min_norm_projection(self):
        np.testing.assert_allclose(solve_min_norm(AffineConstraint([1.0, 1.0], 2.0)).u, [-1.0, -1.0])

    def test_min_norm_infeasible(self):
        with pytest.raises(InfeasibleError):
            solve_min_norm(AffineConstraint([0.0], 1.0))

    def test_tracking_idle(self):
        assert solve_tracking(AffineConstraint([1.0], 0.5, "ge"), [0.3]).u[0] == 0.3

    def test_tracking_projection(self):
        assert solve_tracking(AffineConstraint([1.0], 0.0, "ge"), [-2.0]).u[0] == pytest.approx(0.0)

    def test_tracking_infeasible(self):
        with pytest.raises(InfeasibleError):
            solve_tracking(AffineConstraint([0.0], -1.0, "ge"), [0.0])

    def test_slack_idle(self):
        sol = solve_tracking_slack(AffineConstraint([1.0], 1.0, "ge"), [0.5], 3.0)
        assert sol.u[0] == 0.5 and sol.r == 0.0

    def test_slack_uncapped(self):
        # v = 1, |a|^2 = 1, lambda = 4: mu = 1, constraint met without slack
        sol = solve_tracking_slack(AffineConstraint([1.0], -1.0, "ge"), [0.0], 4.0)
        assert sol.u[0] == pytest.approx(1.0) and sol.r == 0.0

    def test_slack_capped(self):
        # v = 3, |a|^2 = 1, lambda = 2: mu = 1, r = 2
        sol = solve_tracking_slack(AffineConstraint([1.0], -3.0, "ge"), [0.0], 2.0)
        assert sol.u[0] == pytest.approx(1.0) and sol.r == pytest.approx(2.0)

    def test_slack_zero_gradient(self):
        sol = solve_tracking_slack(AffineConstraint([0.0], -1.5, "ge"), [0.7], 2.0)
        assert sol.u[0] == 0.7 and sol.r == 1.5 and sol.constraint_active

    def test_sense_checked(self):
        with pytest.raises(ContractError):
            solve_min_norm(AffineConstraint([1.0], 0.0, "ge"))
        with pytest.raises(ContractError):
            solve_tracking(AffineConstraint([1.0], 0.0, "le"), [0.0])
        with pytest.raises(ContractError):
            solve_tracking_slack(AffineConstraint([1.0], 0.0, "ge"), [0.0], 0.0)
        with pytest.raises(ContractError):
            AffineConstraint([math.nan], 0.0)

    @pytest.mark.parametrize("kind,m", [("min_norm", 1), ("min_norm", 2), ("tracking", 1), ("tracking", 2), ("slack", 1)])
    def test_grid_agreement(self, kind, m):
        rng = np.random.default_rng([len(kind), m])
        for _ in range(20):
            u_err, r_err, viol, gap = qp_grid_errors(kind, rng, m)
            assert u_err <= 2e-3 and r_err <= 2e-3
            assert viol <= 1e-10
            assert gap <= 1e-9

    @given(st.tuples(coef, coef), coef, st.tuples(coef, coef))
    def test_filter_idle_exact(self, a, b, u_ref):
        a, u_ref = np.array(a), np.array(u_ref)
        if a @ u_ref + b >= 0:
            np.testing.assert_array_equal(solve_tracking(AffineConstraint(a, b, "ge"), u_ref).u, u_ref)
            np.testing.assert_array_equal(solve_tracking_slack(AffineConstraint(a, b, "ge"), u_ref, 1.0).u, u_ref)
        if b <= 0:
            np.testing.assert_array_equal(solve_min_norm(AffineConstraint(a, b)).u, np.zeros(2))

    @given(st.tuples(coef, coef), coef, st.tuples(coef, coef), st.floats(0.01, 100))
    def test_slack_feasible(self, a, b, u_ref, lam):
        sol = solve_tracking_slack(AffineConstraint(a, b, "ge"), u_ref, lam)
        assert sol.r >= 0
        assert np.dot(a, sol.u) + b + sol.r >= -1e-10 * max(1.0, abs(b), np.linalg.norm(u_ref) * np.linalg.norm(a))


class TestWrap:
    @given(st.floats(-100, 100))
    def test_range(self, angle):
        w = float(wrap_to_pi(angle))
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(angle), abs_tol=1e-9)

    def test_boundaries(self):
        assert wrap_to_pi(math.pi) == pytest.approx(math.pi)
        assert wrap_to_pi(-math.pi) == pytest.approx(math.pi)
        assert wrap_to_pi(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


class TestReferences:
    def test_acc(self):
        np.testing.assert_allclose(acc_reference()(np.array([[0.0, 18.0, 30.0]])), [[200.0]])

    def test_dubins(self):
        # target straight ahead, heading 0.1: u = -10 * 0.1
        assert dubins_reference()(np.array([0.0, 0.0, 0.1]))[0] == pytest.approx(-1.0)

    def test_zero(self):
        assert zero_reference(2)(np.zeros((3, 4))).shape == (3, 2)

    def test_controller_table(self):
        for name, (family, robust, slack) in CONTROLLERS.items():
            base = baseline_of(name)
            assert CONTROLLERS[base] == (family, False, slack)


class TestClfPolicy:
    def test_origin(self, pendulum_model):
        V = make_quadratic_clf(pendulum_model, [[8.0, 5.0]], 0.5)
        np.testing.assert_array_equal(cr_clf_policy(V, pendulum_model, 0.3)(np.zeros(2)), [0.0])

    def test_more_robust_more_effort(self, pendulum_model):
        V = make_quadratic_clf(pendulum_model, [[8.0, 5.0]], 0.5)
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(500, 2))
        lo, hi = cr_clf_policy(V, pendulum_model, 0.05), cr_clf_policy(V, pendulum_model, 0.2)
        s_lo, s_hi = lo.solve(X), hi.solve(X)
        both = s_lo.active & s_hi.active
        assert both.sum() > 50
        assert np.all(np.abs(s_hi.u[both]) >= np.abs(s_lo.u[both]))

    def test_infeasible_single_and_batch(self):
        model = planted({"factors": [["1", "u"], ["1", "x1", "x2"]]}, 2, {(0, "x1"): -1.0, (1, "x2"): -1.0})
        policy = CRCLFPolicy(QuadraticLyapunov.from_matrix(np.eye(2), 3.0), model, 0.0)
        with pytest.raises(InfeasibleError) as info:
            policy(np.array([1.0, 0.0]))
        np.testing.assert_array_equal(info.value.state, [1.0, 0.0])
        U = policy(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert np.isnan(U[0, 0]) and U[1, 0] == 0.0

    def test_lipschitz_probe(self, pendulum_model):
        V = make_quadratic_clf(pendulum_model, [[8.0, 5.0]], 0.5)
        policy = cr_clf_policy(V, pendulum_model, 0.1)
        rng = np.random.default_rng(1)
        X = rng.uniform(-1, 1, size=(2000, 2))
        Y = X + rng.normal(scale=1e-4, size=X.shape)
        a_x, _ = policy.constraint_rows(X)
        a_y, _ = policy.constraint_rows(Y)
        keep = (np.abs(a_x[:, 0]) > 0.05) & (np.abs(a_y[:, 0]) > 0.05)
        ratio = np.abs(policy(X)[keep] - policy(Y)[keep])[:, 0] / np.linalg.norm(X - Y, axis=1)[keep]
        assert ratio.max() < 1e4


class TestCbfPolicy:
    def test_deep_interior_is_reference(self, acc_model):
        h = acc_barrier(1.0, 2.0)
        ref = acc_reference()
        policy = cr_cbf_policy(h, acc_model, 0.1, ref)
        x = np.array([0.0, 15.0, 60.0])
        np.testing.assert_array_equal(policy(x), ref(x))

    def test_margin_nonincreasing_in_q(self, acc_model):
        h = acc_barrier(1.0, 2.0)
        rng = np.random.default_rng(2)
        X = np.column_stack([np.zeros(300), rng.uniform(10, 20, 300), rng.uniform(10, 25, 300)])
        for x in X:
            m = [cbf_margin(h, acc_model, q, x, cr_cbf_policy(h, acc_model, q, acc_reference())(x)).value for q in (0.0, 0.1, 0.5)]
            assert m[0] >= m[1] - 1e-9 and m[1] >= m[2] - 1e-9

    def test_planted_acc_stays_safe(self, acc_model):
        h = acc_barrier(1.0, 2.0)
        policy = cr_cbf_policy(h, acc_model, 0.0, acc_reference())
        system = BenchmarkSystem("acc")
        x0s = sample_initial_states(system, acc_safe_sampler(1.0), 30, 3)
        for traj in integrate_batch(system, policy, x0s, 5.0, 0.01, hold="stage"):
            assert traj.failure is None
            _, min_h = verify_barrier(traj, h)
            assert min_h >= -1e-9

    def test_slack_variant_never_infeasible(self):
        from conformal_control.certificates import constant_barrier

        model = planted({"factors": [["1", "u"], ["1", "x1"]]}, 1, {})
        h = constant_barrier(-1.0, n=1, gamma=1.0)
        policy = cr_cbf_policy(h, model, 0.0, zero_reference(), slack=10.0)
        out = policy.solve(np.array([[0.0], [1.0]]))
        assert not out.infeasible.any()
        np.testing.assert_allclose(out.r, [1.0, 1.0])
