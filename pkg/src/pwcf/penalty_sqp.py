"""Exact-penalty BFGS-SQP solver for nonsmooth constrained problems.

The penalty function is ``phi = mu * f + v`` with ``v`` the total constraint
violation.  Each iteration steers the penalty parameter so the search
direction predicts enough violation reduction, takes a weak-Wolfe step, then
estimates stationarity from the inverse-Hessian combination of recent
gradients.  All failures surface on the report; the solver never aborts.
"""

import time
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .numerics import InverseHessian
from .qp import BoxQP, TerminationQP, solve_box_qp, solve_termination_qp


class NotDescentError(Exception):
    """The supplied direction is not a descent direction for the penalty."""


class LineSearchError(Exception):
    """No acceptable step found within the bracketing budget."""


@dataclass
class NonsmoothProblem:
    """Objective and constraint oracles, each mapping x to (value, gradient).

    Inequalities use the ``c(x) <= 0`` convention, equalities ``h(x) = 0``.
    Oracles must be total and pure; at kinks any Clarke subgradient is a
    valid gradient choice.
    """

    dim: int
    objective: object
    inequality_constraints: list = field(default_factory=list)
    equality_constraints: list = field(default_factory=list)

    @property
    def n_constraints(self):
        return len(self.inequality_constraints) + len(self.equality_constraints)


@dataclass
class SolverConfig:
    mu0: float = 1.0
    c_v: float = 0.9  # required fraction of predicted violation reduction
    c_mu: float = 0.5  # penalty shrink factor
    tau_stat: float = 1e-2  # stationarity tolerance
    tau_viol: float = 1e-2  # violation tolerance
    max_iter: int = 500
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.5
    grad_history: int = 10  # iterates kept for the stationarity estimate
    stationarity_neighborhood: float = 1e-4  # only gradients this close enter the estimate
    memory: int | None = None  # None = dense inverse Hessian
    h0_scaling: bool = False  # must stay off for warm starts
    qp_tol: float = 1e-10
    qp_max_iter: int = 10000
    ls_max_iter: int = 50
    steering_max_shrink: int = 30
    record_trajectory: bool = True

    def __post_init__(self):
        if not 0 < self.c_v < 1:
            raise ValueError("c_v must lie in (0, 1)")
        if not 0 < self.c_mu < 1:
            raise ValueError("c_mu must lie in (0, 1)")
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.tau_stat <= 0 or self.tau_viol <= 0:
            raise ValueError("tolerances must be positive")
        if self.mu0 <= 0:
            raise ValueError("mu0 must be positive")
        if self.grad_history < 1:
            raise ValueError("grad_history must be at least 1")

    def variant(self, **kwargs):
        return replace(self, **kwargs)


class Termination(str, Enum):
    TOLERANCE_MET = "tolerance_met"
    MAX_ITER = "max_iter"
    LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass
class IterateRecord:
    k: int
    x: np.ndarray
    f: float
    violation: float
    mu: float
    step: float
    phi: float
    stationarity: float


@dataclass
class SolverReport:
    x_star: np.ndarray
    f_star: float
    violation: float
    stationarity: float
    termination: Termination
    iterations: int
    trajectory: list
    wall_time: float
    mu_final: float


# ---------------------------------------------------------------------------
# point evaluation and the penalty function


@dataclass
class PointEval:
    x: np.ndarray
    f: float
    grad_f: np.ndarray
    ineq: np.ndarray  # values c_i(x)
    ineq_grads: np.ndarray  # dim x p
    eq: np.ndarray  # values h_j(x)
    eq_grads: np.ndarray  # dim x q

    @property
    def finite(self):
        return (
            np.isfinite(self.f)
            and np.all(np.isfinite(self.grad_f))
            and np.all(np.isfinite(self.ineq))
            and np.all(np.isfinite(self.ineq_grads))
            and np.all(np.isfinite(self.eq))
            and np.all(np.isfinite(self.eq_grads))
        )


def evaluate_problem(problem, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.dim,):
        raise ValueError(f"point has shape {x.shape}, expected ({problem.dim},)")
    f, gf = problem.objective(x)
    p = len(problem.inequality_constraints)
    q = len(problem.equality_constraints)
    c_vals = np.empty(p)
    c_grads = np.empty((problem.dim, p))
    for i, oracle in enumerate(problem.inequality_constraints):
        c_vals[i], c_grads[:, i] = oracle(x)
    h_vals = np.empty(q)
    h_grads = np.empty((problem.dim, q))
    for j, oracle in enumerate(problem.equality_constraints):
        h_vals[j], h_grads[:, j] = oracle(x)
    return PointEval(x.copy(), float(f), np.asarray(gf, dtype=float), c_vals, c_grads, h_vals, h_grads)


def _violation(ev):
    return float(np.maximum(ev.ineq, 0.0).sum() + np.abs(ev.eq).sum())


def _penalty_from_eval(ev, mu):
    """phi = mu f + v with the deterministic subgradient selection.

    Inequalities at exactly zero count as inactive; equalities at exactly
    zero contribute nothing (sign(0) = 0).
    """
    v = _violation(ev)
    phi = mu * ev.f + v
    grad = mu * ev.grad_f.copy()
    active = ev.ineq > 0.0
    if active.any():
        grad += ev.ineq_grads[:, active].sum(axis=1)
    if ev.eq.size:
        grad += ev.eq_grads @ np.sign(ev.eq)
    return phi, grad, v


def penalty_eval(problem, x, mu):
    """Exact penalty value, its subgradient, and the total violation."""
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    phi, grad, v = _penalty_from_eval(evaluate_problem(problem, x), mu)
    return phi, grad, v


def _violation_model_from_eval(ev, d):
    ineq_part = np.maximum(ev.ineq + ev.ineq_grads.T @ d, 0.0).sum() if ev.ineq.size else 0.0
    eq_part = np.abs(ev.eq + ev.eq_grads.T @ d).sum() if ev.eq.size else 0.0
    return float(ineq_part + eq_part)


def linear_violation_model(problem, x, d):
    """First-order model of the total violation after a step ``d``."""
    d = np.asarray(d, dtype=float)
    if d.shape != (problem.dim,):
        raise ValueError("direction dimension mismatch")
    return _violation_model_from_eval(evaluate_problem(problem, x), d)


# ---------------------------------------------------------------------------
# search direction and steering


def _direction(ev, hessian, mu, cfg):
    """Search direction from the dual of the penalty-step QP.

    Inequality multipliers live in [0, 1]; equality multipliers, coming from
    the two-sided slack of the absolute value, live in [-1, 1].
    """
    p, q = ev.ineq.size, ev.eq.size
    if p + q == 0:
        return -hessian.apply(mu * ev.grad_f)
    cols = np.hstack([ev.ineq_grads, ev.eq_grads])
    w_cols = np.column_stack([hessian.apply(cols[:, j]) for j in range(p + q)])
    w_gf = hessian.apply(ev.grad_f)
    quad = cols.T @ w_cols
    lin = cols.T @ (mu * w_gf) - np.concatenate([ev.ineq, ev.eq])
    lower = np.concatenate([np.zeros(p), -np.ones(q)])
    upper = np.ones(p + q)
    res = solve_box_qp(BoxQP(quad, lin, lower, upper), tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    return -(mu * w_gf + w_cols @ res.x)


def _steer(ev, hessian, mu, cfg):
    """Shrink the penalty parameter until the direction cuts the violation.

    Feasible points need no steering.  Otherwise, accept the direction if
    its predicted violation drops below ``c_v * v``; if not, shrink toward
    the reference direction computed at ``mu = 0`` until either that test or
    the relative violation-reduction test against the reference passes.
    Shrinkage is capped, after which the reference direction itself is used.
    """
    d = _direction(ev, hessian, mu, cfg)
    v = _violation(ev)
    if v <= 0.0:
        return d, mu, 0
    if _violation_model_from_eval(ev, d) < cfg.c_v * v:
        return d, mu, 0
    d_ref = _direction(ev, hessian, 0.0, cfg)
    reduction_ref = v - _violation_model_from_eval(ev, d_ref)
    shrinks = 0
    for _ in range(cfg.steering_max_shrink):
        mu *= cfg.c_mu
        shrinks += 1
        d = _direction(ev, hessian, mu, cfg)
        model = _violation_model_from_eval(ev, d)
        if model < cfg.c_v * v or (v - model) >= cfg.c_v * reduction_ref:
            return d, mu, shrinks
    return d_ref, mu, shrinks


def steering(problem, x, hessian, mu, cfg=SolverConfig()):
    """Public steering step: returns the direction and the (possibly smaller) mu."""
    if mu <= 0:
        raise ValueError("mu must be positive on entry")
    ev = evaluate_problem(problem, np.asarray(x, dtype=float))
    d, mu_new, _ = _steer(ev, hessian, mu, cfg)
    return d, mu_new


# ---------------------------------------------------------------------------
# weak-Wolfe line search


@dataclass
class LineSearchResult:
    t: float
    x: np.ndarray
    eval: PointEval
    phi: float
    grad_phi: np.ndarray
    violation: float


def _armijo_wolfe_core(problem, x, d, phi0, dphi0, mu, cfg):
    if not np.isfinite(dphi0) or dphi0 >= 0.0:
        raise NotDescentError(f"directional derivative {dphi0} is not negative")
    lo, hi = 0.0, np.inf
    t = 1.0
    for _ in range(cfg.ls_max_iter):
        ev = evaluate_problem(problem, x + t * d)
        if ev.finite:
            phi_t, grad_t, v_t = _penalty_from_eval(ev, mu)
        else:
            phi_t = np.inf
        if not np.isfinite(phi_t) or phi_t > phi0 + cfg.wolfe_c1 * t * dphi0:
            hi = t  # sufficient-decrease failure: shrink
        elif grad_t @ d < cfg.wolfe_c2 * dphi0:
            lo = t  # curvature failure: expand
        else:
            return LineSearchResult(t, x + t * d, ev, phi_t, grad_t, v_t)
        t = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * t
    raise LineSearchError(f"no acceptable step within {cfg.ls_max_iter} brackets")


def armijo_wolfe(problem, x, d, phi0, dphi0, mu, cfg=SolverConfig()):
    """Weak-Wolfe bracketing line search on the penalty function.

    Returns ``(t, x_new, phi_new, grad_new, v_new)`` for the first step
    satisfying both the sufficient-decrease and the curvature condition.
    """
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    res = _armijo_wolfe_core(problem, x, d, float(phi0), float(dphi0), mu, cfg)
    return res.t, res.x, res.phi, res.grad_phi, res.violation


# ---------------------------------------------------------------------------
# stationarity estimate


def _history_columns(ev):
    """Gradient columns entering the stationarity QP for one iterate.

    Equality constraints are folded to ``|h| <= 0``: their column is
    ``sign(h) grad h`` and their value ``|h|``.
    """
    cols = [ev.ineq_grads[:, i].copy() for i in range(ev.ineq.size)]
    cols += [np.sign(ev.eq[j]) * ev.eq_grads[:, j] for j in range(ev.eq.size)]
    return ev.grad_f.copy(), cols


def _constraint_values(ev):
    return np.concatenate([ev.ineq, np.abs(ev.eq)])


def _solve_stationarity(history, con_values, hessian, mu, cfg, z0=None):
    grad_obj = np.column_stack([g for g, _ in history])
    p = len(history[0][1])
    grad_cons = [np.column_stack([cols[i] for _, cols in history]) for i in range(p)]
    tqp = TerminationQP(grad_obj, grad_cons, con_values, hessian, mu)
    return solve_termination_qp(tqp, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter, z0=z0)


def stationarity_estimate(history, con_values, hessian, mu, cfg=SolverConfig()):
    """Norm of the inverse-Hessian combination of recent gradients.

    ``history`` holds, most recent last, one ``(grad_f, [constraint grads])``
    tuple per iterate; ``con_values`` are the constraint values at the
    current iterate.
    """
    if not history:
        raise ValueError("history must be non-empty")
    return _solve_stationarity(list(history), np.asarray(con_values, dtype=float), hessian, mu, cfg).stationarity


def _neighboring(history, x, radius):
    """Entries of the positional history close enough to the current iterate.

    Gradients sampled far from the current point say nothing about local
    stationarity and can fake a zero combination, so they are excluded.
    The current iterate itself is always within radius zero.
    """
    return [(g, cols) for (xi, g, cols) in history if np.linalg.norm(xi - x) <= radius]


# ---------------------------------------------------------------------------
# the driver


def _best_iterate(records, tau_viol):
    """Screening order: feasible with least objective, else least violation."""
    feasible = [r for r in records if r.violation <= tau_viol]
    if feasible:
        return min(feasible, key=lambda r: r.f)
    return min(records, key=lambda r: r.violation)


def solve(problem, x0, cfg=SolverConfig()):
    """Run the penalty-SQP loop from ``x0`` until tolerance, budget, or failure."""
    t_start = time.perf_counter()
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (problem.dim,):
        raise ValueError("x0 dimension mismatch")
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")

    hessian = InverseHessian(problem.dim, memory=cfg.memory)
    mu = cfg.mu0
    ev = evaluate_problem(problem, x)
    if not ev.finite:
        raise ValueError("problem oracles are non-finite at x0")
    phi, grad_phi, v = _penalty_from_eval(ev, mu)

    history = deque(maxlen=cfg.grad_history)
    history.append((x.copy(),) + _history_columns(ev))
    warm_cache = {"z": None}

    trajectory = []
    seen = [IterateRecord(0, x.copy(), ev.f, v, mu, 0.0, phi, np.nan)]
    if cfg.record_trajectory:
        trajectory.append(seen[0])
    stationarity = np.nan
    termination = Termination.MAX_ITER
    iterations = 0

    def current_stationarity():
        entries = _neighboring(history, x, cfg.stationarity_neighborhood)
        z0 = warm_cache["z"]
        if z0 is not None and z0.size != len(entries) * (1 + problem.n_constraints):
            z0 = None
        res = _solve_stationarity(entries, _constraint_values(ev), hessian, mu, cfg, z0=z0)
        warm_cache["z"] = np.concatenate([res.sigma, res.lam])
        return res.stationarity

    for k in range(cfg.max_iter):
        d, mu_hat, _ = _steer(ev, hessian, mu, cfg)
        if mu_hat < mu:
            mu = mu_hat
            phi, grad_phi, v = _penalty_from_eval(ev, mu)
        dphi0 = float(grad_phi @ d)
        try:
            ls = _armijo_wolfe_core(problem, x, d, phi, dphi0, mu, cfg)
        except (NotDescentError, LineSearchError):
            stationarity = current_stationarity()
            if stationarity < cfg.tau_stat and v < cfg.tau_viol:
                termination = Termination.TOLERANCE_MET
            else:
                termination = Termination.LINE_SEARCH_FAILURE
            break

        prev_grad_phi = grad_phi
        x, ev, phi, grad_phi, v = ls.x, ls.eval, ls.phi, ls.grad_phi, ls.violation
        iterations = k + 1

        history.append((x.copy(),) + _history_columns(ev))
        stationarity = current_stationarity()

        record = IterateRecord(iterations, x.copy(), ev.f, v, mu, ls.t, phi, stationarity)
        seen.append(record)
        if cfg.record_trajectory:
            trajectory.append(record)

        if stationarity < cfg.tau_stat and v < cfg.tau_viol:
            termination = Termination.TOLERANCE_MET
            break

        s = x - seen[-2].x
        y = grad_phi - prev_grad_phi
        if k == 0 and cfg.h0_scaling:
            yy = y @ y
            ys = y @ s
            if yy > 0 and ys > 0:
                hessian.rescale_identity(ys / yy)
        hessian.update(s, y)

    if termination is Termination.LINE_SEARCH_FAILURE:
        best = _best_iterate(seen, cfg.tau_viol)
        x_star, f_star, v_star = best.x, best.f, best.violation
        stat_star = stationarity if best is seen[-1] or np.isnan(best.stationarity) else best.stationarity
    else:
        x_star, f_star, v_star, stat_star = x, ev.f, v, stationarity

    return SolverReport(
        x_star=x_star.copy(),
        f_star=float(f_star),
        violation=float(v_star),
        stationarity=float(stat_star),
        termination=termination,
        iterations=iterations,
        trajectory=trajectory,
        wall_time=time.perf_counter() - t_start,
        mu_final=mu,
    )
