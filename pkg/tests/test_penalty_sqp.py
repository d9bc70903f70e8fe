import numpy as np
import pytest
from numpy.testing import assert_allclose

from pwcf.numerics import InverseHessian
from pwcf.penalty_sqp import (
    LineSearchError,
    NonsmoothProblem,
    NotDescentError,
    SolverConfig,
    Termination,
    armijo_wolfe,
    linear_violation_model,
    penalty_eval,
    solve,
    stationarity_estimate,
    steering,
)


def quadratic_problem():
    # min x^2 s.t. x >= 1
    return NonsmoothProblem(
        dim=1,
        objective=lambda x: (float(x[0] ** 2), np.array([2.0 * x[0]])),
        inequality_constraints=[lambda x: (1.0 - x[0], np.array([-1.0]))],
    )


def linf_equality_problem():
    def objective(x):
        i = int(np.argmax(np.abs(x)))
        g = np.zeros(x.size)
        g[i] = np.sign(x[i]) if x[i] != 0 else 0.0
        return float(np.abs(x).max()), g

    return NonsmoothProblem(
        dim=2,
        objective=objective,
        equality_constraints=[lambda x: (float(x[0] + x[1] - 1.0), np.array([1.0, 1.0]))],
    )


class TestPenaltyEval:
    def test_infeasible_point(self):
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (float(x[0] ** 2), np.array([2.0 * x[0]])),
            inequality_constraints=[lambda x: (float(x[0] - 1.0), np.array([1.0]))],
        )
        phi, grad, v = penalty_eval(prob, np.array([2.0]), 0.5)
        assert phi == pytest.approx(3.0)
        assert v == pytest.approx(1.0)
        assert_allclose(grad, [0.5 * 4.0 + 1.0])

    def test_feasible_point(self):
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (float(x[0] ** 2), np.array([2.0 * x[0]])),
            inequality_constraints=[lambda x: (float(x[0] - 1.0), np.array([1.0]))],
        )
        phi, _, v = penalty_eval(prob, np.array([0.5]), 0.5)
        assert phi == pytest.approx(0.125)
        assert v == 0.0

    def test_equality_with_zero_weight_objective(self):
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (0.0, np.array([0.0])),
            equality_constraints=[lambda x: (float(x[0]), np.array([1.0]))],
        )
        phi, _, v = penalty_eval(prob, np.array([-0.2]), 0.0)
        assert phi == pytest.approx(0.2)
        assert v == pytest.approx(0.2)

    def test_bookkeeping_matches_recomputation(self):
        # phi recorded on the trajectory equals mu f + v recomputed
        rep = solve(quadratic_problem(), np.array([3.0]), SolverConfig())
        prob = quadratic_problem()
        for rec in rep.trajectory:
            phi, _, v = penalty_eval(prob, rec.x, rec.mu)
            assert abs(rec.phi - phi) <= 1e-12 * max(1.0, abs(phi))
            assert abs(rec.violation - v) <= 1e-12


class TestLinearViolationModel:
    def test_step_restores_feasibility(self):
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (0.0, np.array([0.0])),
            inequality_constraints=[lambda x: (float(x[0] - 1.0), np.array([1.0]))],
        )
        assert linear_violation_model(prob, np.array([2.0]), np.array([-1.0])) == 0.0

    def test_zero_step_gives_violation(self):
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (0.0, np.array([0.0])),
            inequality_constraints=[lambda x: (float(x[0] - 1.0), np.array([1.0]))],
        )
        assert linear_violation_model(prob, np.array([2.0]), np.array([0.0])) == pytest.approx(1.0)

    def test_componentwise(self):
        prob = NonsmoothProblem(
            dim=2,
            objective=lambda x: (0.0, np.zeros(2)),
            inequality_constraints=[
                lambda x: (0.5, np.array([-0.2, 0.0])),
                lambda x: (-0.3, np.array([0.1, 0.0])),
            ],
        )
        value = linear_violation_model(prob, np.zeros(2), np.array([1.0, 0.0]))
        assert value == pytest.approx(0.3)


class TestSteering:
    def test_feasible_point_keeps_mu(self):
        prob = quadratic_problem()
        d, mu_new = steering(prob, np.array([2.0]), InverseHessian(1), 4.0)
        assert mu_new == 4.0  # feasible: nothing to steer

    def test_violation_already_cut_keeps_mu_and_direction(self):
        # d at mu solves the dual exactly and predicts zero violation
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (0.0, np.array([0.0])),
            inequality_constraints=[lambda x: (float(x[0] - 1.0), np.array([1.0]))],
        )
        d, mu_new = steering(prob, np.array([2.0]), InverseHessian(1), 1.0)
        assert mu_new == 1.0
        assert linear_violation_model(prob, np.array([2.0]), d) < 0.9 * 1.0

    def test_shrinks_until_reduction_test_passes(self):
        # replay of the steering loop with the dual-QP oracle: mu must fall
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (float(-x[0]), np.array([-1.0])),
            inequality_constraints=[lambda x: (float(x[0]), np.array([1.0]))],
        )
        cfg = SolverConfig(c_v=0.9, c_mu=0.5)
        d, mu_new = steering(prob, np.array([1.0]), InverseHessian(1), 10.0, cfg)
        assert mu_new < 10.0
        # oracle replay: at mu the dual has lambda = 1, d = mu - 1, model = mu
        mu = 10.0
        shrinks = 0
        while not (mu < 0.9 * 1.0 or (1.0 - mu) >= 0.9 * 1.0):
            mu *= 0.5
            shrinks += 1
        assert shrinks >= 1
        assert mu_new == pytest.approx(mu)

    def test_mu_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            steering(quadratic_problem(), np.array([2.0]), InverseHessian(1), 0.0)


class TestArmijoWolfe:
    def test_quadratic_accepts_unit_step(self):
        prob = NonsmoothProblem(dim=1, objective=lambda x: (float(x[0] ** 2), np.array([2.0 * x[0]])))
        t, x_new, phi_new, grad_new, v_new = armijo_wolfe(
            prob, np.array([1.0]), np.array([-1.0]), 1.0, -2.0, 1.0
        )
        assert t == 1.0
        assert phi_new == 0.0
        # both conditions hold at t = 1 analytically
        assert phi_new <= 1.0 + 1e-4 * 1.0 * (-2.0)
        assert grad_new @ np.array([-1.0]) >= 0.5 * (-2.0)

    def test_not_descent(self):
        prob = NonsmoothProblem(dim=1, objective=lambda x: (float(x[0] ** 2), np.array([2.0 * x[0]])))
        with pytest.raises(NotDescentError):
            armijo_wolfe(prob, np.array([1.0]), np.array([1.0]), 1.0, +1.0, 1.0)

    def test_absolute_value_accepts_some_step(self):
        prob = NonsmoothProblem(
            dim=1,
            objective=lambda x: (float(abs(x[0])), np.array([np.sign(x[0]) if x[0] else 0.0])),
        )
        t, _, phi_new, _, _ = armijo_wolfe(prob, np.array([1.0]), np.array([-1.0]), 1.0, -1.0, 1.0)
        assert 0.0 < t < 2.0
        assert phi_new < 1.0

    def test_accepted_steps_reverify(self):
        # recorded steps satisfy both weak-Wolfe conditions post hoc
        prob = linf_equality_problem()
        cfg = SolverConfig()
        rep = solve(prob, np.array([2.0, -0.5]), cfg)
        for prev, rec in zip(rep.trajectory, rep.trajectory[1:]):
            phi0, grad0, _ = penalty_eval(prob, prev.x, rec.mu)
            d = (rec.x - prev.x) / rec.step
            dphi0 = grad0 @ d
            phi_t, grad_t, _ = penalty_eval(prob, rec.x, rec.mu)
            assert phi_t <= phi0 + cfg.wolfe_c1 * rec.step * dphi0 + 1e-12
            assert grad_t @ d >= cfg.wolfe_c2 * dphi0 - 1e-12


class TestStationarityEstimate:
    def test_single_smooth_gradient(self):
        g = np.array([0.6, -0.8])
        value = stationarity_estimate([(g, [])], [], InverseHessian(2), 1.0)
        assert value == pytest.approx(1.0, abs=1e-9)

    def test_opposite_gradients(self):
        g = np.array([2.0, 0.0])
        value = stationarity_estimate([(g, []), (-g, [])], [], InverseHessian(2), 1.0)
        assert value <= 1e-8

    def test_converged_constrained_optimum(self):
        rep = solve(quadratic_problem(), np.array([3.0]), SolverConfig(tau_stat=1e-7, tau_viol=1e-7))
        assert rep.termination is Termination.TOLERANCE_MET
        assert rep.stationarity <= 1e-6

    def test_empty_history_rejected(self):
        with pytest.raises(ValueError):
            stationarity_estimate([], [], InverseHessian(2), 1.0)


class TestSolve:
    def test_constrained_quadratic(self):
        rep = solve(quadratic_problem(), np.array([3.0]), SolverConfig())
        assert abs(rep.x_star[0] - 1.0) <= 1e-3
        assert abs(rep.f_star - 1.0) <= 2e-3
        assert rep.violation <= 1e-2

    def test_linf_equality(self):
        rep = solve(linf_equality_problem(), np.array([2.0, -0.5]), SolverConfig())
        assert abs(rep.f_star - 0.5) <= 1e-3
        assert_allclose(rep.x_star, [0.5, 0.5], atol=2e-3)

    def test_unconstrained_quadratic(self):
        rng = np.random.default_rng(11)
        prob = NonsmoothProblem(dim=4, objective=lambda x: (float(x @ x), 2.0 * x))
        rep = solve(prob, rng.normal(size=4), SolverConfig())
        assert rep.termination is Termination.TOLERANCE_MET
        assert np.linalg.norm(rep.x_star) <= 1e-2
        assert rep.stationarity <= 1e-2

    def test_mu_never_increases(self):
        rep = solve(linf_equality_problem(), np.array([2.0, -0.5]), SolverConfig())
        mus = [rec.mu for rec in rep.trajectory]
        assert all(b <= a for a, b in zip(mus, mus[1:]))

    def test_deterministic_trajectories(self):
        cfg = SolverConfig()
        r1 = solve(linf_equality_problem(), np.array([2.0, -0.5]), cfg)
        r2 = solve(linf_equality_problem(), np.array([2.0, -0.5]), cfg)
        assert len(r1.trajectory) == len(r2.trajectory)
        for a, b in zip(r1.trajectory, r2.trajectory):
            assert np.array_equal(a.x, b.x)
            assert a.f == b.f and a.mu == b.mu and a.step == b.step

    def test_tolerance_met_is_self_certifying(self):
        prob = quadratic_problem()
        cfg = SolverConfig()
        rep = solve(prob, np.array([3.0]), cfg)
        assert rep.termination is Termination.TOLERANCE_MET
        _, _, v = penalty_eval(prob, rep.x_star, rep.mu_final)
        assert v <= cfg.tau_viol
        assert rep.stationarity <= cfg.tau_stat

    def test_line_search_failure_returns_best_iterate(self):
        # objective whose oracle lies about the gradient direction: descent
        # never materializes, so the first line search fails immediately
        prob = NonsmoothProblem(
            dim=1, objective=lambda x: (float(abs(x[0])), np.array([0.0]))
        )
        rep = solve(prob, np.array([1.0]), SolverConfig())
        assert rep.termination in (Termination.LINE_SEARCH_FAILURE, Termination.TOLERANCE_MET)
        assert np.isfinite(rep.f_star)

    def test_max_iter_reported(self):
        rep = solve(quadratic_problem(), np.array([3.0]), SolverConfig(max_iter=1))
        assert rep.termination is Termination.MAX_ITER
        assert rep.iterations == 1

    def test_bad_x0(self):
        with pytest.raises(ValueError):
            solve(quadratic_problem(), np.array([np.nan]), SolverConfig())

    def test_limited_memory_mode_solves(self):
        rep = solve(quadratic_problem(), np.array([3.0]), SolverConfig(memory=20))
        assert abs(rep.x_star[0] - 1.0) <= 1e-3


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(c_v=1.5)
        with pytest.raises(ValueError):
            SolverConfig(c_mu=0.0)
        with pytest.raises(ValueError):
            SolverConfig(wolfe_c1=0.9, wolfe_c2=0.5)
        with pytest.raises(ValueError):
            SolverConfig(tau_stat=0.0)

    def test_variant(self):
        cfg = SolverConfig()
        other = cfg.variant(max_iter=7)
        assert other.max_iter == 7
        assert cfg.max_iter != 7
