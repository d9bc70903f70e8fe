"""Projections onto simple sets and the two small QPs solved each iteration.

The search-direction QP is a box-constrained dual; the stationarity QP adds
a scaled-simplex block for the objective-gradient weights.  Both are solved
by projected gradient with Barzilai-Borwein steps and a monotone backtracking
safeguard, stopping on the fixed-point residual of the projection map.
"""

from dataclasses import dataclass, field

import numpy as np

from .numerics import InverseHessian, _as_vector


# ---------------------------------------------------------------------------
# projections


def project_box(v, lower, upper):
    """Euclidean projection onto the box ``[lower, upper]``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite point")
    return np.clip(v, lower, upper)


def project_l2_ball(v, radius):
    """Euclidean projection onto ``{z : ||z||_2 <= radius}``."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite point")
    if radius <= 0:
        raise ValueError("radius must be positive")
    norm = np.linalg.norm(v)
    if norm <= radius:
        return v.copy()
    return (radius / norm) * v


def project_linf_ball(v, radius):
    """Euclidean projection onto ``{z : ||z||_inf <= radius}``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    return project_box(v, -radius, radius)


def project_scaled_simplex(v, total):
    """Projection onto ``{z >= 0, sum(z) = total}`` (sort-based).

    ``total = 0`` collapses the set to the origin.  Sorting is descending;
    equal entries shift by the same threshold, so ties are resolved
    deterministically.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite point")
    if total < 0:
        raise ValueError("total must be nonnegative")
    if total == 0.0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = int(np.nonzero(cond)[0][-1]) + 1
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def project_l1_ball(v, radius):
    """Euclidean projection onto ``{z : ||z||_1 <= radius}`` (sort-based)."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project a non-finite point")
    if radius <= 0:
        raise ValueError("radius must be positive")
    if np.abs(v).sum() <= radius:
        return v.copy()
    return np.sign(v) * project_scaled_simplex(np.abs(v), radius)


def project_linf_box(x, eps, w):
    """Closed-form joint projection of a step ``w`` onto ball-and-box.

    For a pixel value ``x`` in [0, 1] and budget ``eps``, the feasible
    perturbations are ``|delta| <= eps`` with ``x + delta`` in [0, 1]; the
    projection is the clamp of ``w`` to ``[max(-x, -eps), min(1 - x, eps)]``.
    Accepts scalars or arrays (elementwise).
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("x must lie in [0, 1]")
    if np.any(np.asarray(eps) <= 0):
        raise ValueError("eps must be positive")
    lo = np.maximum(-x, -eps)
    hi = np.minimum(1.0 - x, eps)
    out = np.clip(w, lo, hi)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# projected-gradient core


@dataclass
class QPResult:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float


def _projected_gradient(matvec, lin, project, z0, lipschitz, tol, max_iter, polish=None):
    """Minimize 0.5 z'Mz + lin'z over a convex set given by its projector.

    Barzilai-Borwein trial steps, each followed by exact minimization along
    the feasible segment to the projected point (the quadratic makes that
    closed-form), so every iteration decreases the objective.  A stalled BB
    trial falls back to the safe step 1/L before giving up.  ``polish``, when
    given, proposes an exact solve on the current active face and is adopted
    whenever it does not increase the objective; that finishes off the
    semidefinite cases where plain projected gradient crawls.
    """
    z = project(z0)
    safe_step = 1.0 / lipschitz if lipschitz > 0 else 1.0
    step = safe_step
    mz = matvec(z)

    def try_polish(z, mz):
        candidate = polish(z) if polish is not None else None
        if candidate is None:
            return z, mz, False
        mc = matvec(candidate)
        f_now = 0.5 * (z @ mz) + lin @ z
        f_cand = 0.5 * (candidate @ mc) + lin @ candidate
        if f_cand <= f_now + 1e-14 * max(1.0, abs(f_now)):
            return candidate, mc, True
        return z, mz, False

    residual = np.inf
    for k in range(max_iter):
        if k % 50 == 0:
            mz = matvec(z)  # drop accumulated drift from incremental updates
        if k % 10 == 5:
            z, mz, _ = try_polish(z, mz)
        g = mz + lin
        residual = np.max(np.abs(z - project(z - g)))
        if residual <= tol:
            return QPResult(z, k, True, residual)
        trial = min(max(step, 1e-12), 1e12)
        z_new = project(z - trial * g)
        s = z_new - z
        if not s.any():
            z_new = project(z - safe_step * g)
            s = z_new - z
            if not s.any():
                z, mz, adopted = try_polish(z, mz)
                if adopted:
                    residual = np.max(np.abs(z - project(z - (mz + lin))))
                return QPResult(z, k + 1, residual <= tol, residual)
        ms = matvec(z_new) - mz
        sms = s @ ms
        gs = g @ s  # negative by the projection inequality
        alpha = 1.0 if sms <= 0 else min(1.0, -gs / sms)
        z = z + alpha * s
        mz = mz + alpha * ms
        step = (s @ s) / sms if sms > 0 else safe_step
    z, mz, _ = try_polish(z, matvec(z))
    residual = np.max(np.abs(z - project(z - (mz + lin))))
    return QPResult(z, max_iter, residual <= tol, residual)


def _sym_max_eig(m):
    if m.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(0.5 * (m + m.T))[-1])


# ---------------------------------------------------------------------------
# box QP


@dataclass
class BoxQP:
    """min over lower <= x <= upper of 0.5 x'Qx + b'x, Q symmetric PSD."""

    Q: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.b = _as_vector(np.atleast_1d(self.b), name="b")
        n = self.b.size
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        if self.Q.shape != (n, n):
            raise ValueError("Q and b dimensions disagree")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


def _active_set_candidate(m, lin, lower, upper, sum_mask, sum_target, z, kkt_tol=1e-11):
    """Active-set refinement for a small box QP, optionally with one sum tie.

    Starting from the face suggested by ``z``, alternately solves the face
    KKT system exactly, pins the worst bound violator, and frees the pinned
    coordinate with the most wrong-signed multiplier.  Returns a feasible
    point satisfying the face KKT conditions, or ``None`` when the loop ran
    out of budget (the caller's projected-gradient iteration then carries
    on).  ``sum_mask`` selects coordinates tied by a fixed sum; a zero
    target freezes them at zero.
    """
    n = z.size
    finite_lo = np.isfinite(lower)
    finite_hi = np.isfinite(upper)
    span = np.where(finite_lo & finite_hi, upper - lower, 1.0)
    pad = 1e-9 * (1.0 + np.abs(span))
    pin_lo = finite_lo & (z <= lower + pad)
    pin_hi = finite_hi & (z >= upper - pad) & ~pin_lo
    if sum_mask is not None and sum_target <= 1e-12:
        pin_lo = pin_lo | sum_mask  # the tie collapses these to zero
        frozen_sum = True
    else:
        frozen_sum = False

    ratio_budget = n + 2
    for _ in range(3 * n + 10):
        free = ~(pin_lo | pin_hi)
        candidate = np.where(pin_lo, lower, np.where(pin_hi, upper, 0.0))
        candidate[~np.isfinite(candidate)] = 0.0
        use_sum = sum_mask is not None and not frozen_sum
        if use_sum and not (free & sum_mask).any():
            # the sum tie needs at least one free coordinate to hold
            tied = np.nonzero(sum_mask)[0]
            g = m @ candidate + lin
            pin_lo[tied[np.argmin(g[tied])]] = False
            continue
        idx_free = np.nonzero(free)[0]
        nu = 0.0
        if idx_free.size:
            mff = m[np.ix_(idx_free, idx_free)]
            rhs = -(lin[idx_free] + m[np.ix_(idx_free, ~free)] @ candidate[~free])
            if use_sum:
                tie = sum_mask[idx_free].astype(float)
                nf = idx_free.size
                kkt = np.zeros((nf + 1, nf + 1))
                kkt[:nf, :nf] = mff
                kkt[:nf, nf] = -tie
                kkt[nf, :nf] = tie
                sol, *_ = np.linalg.lstsq(kkt, np.concatenate([rhs, [sum_target]]), rcond=None)
                sol, nu = sol[:nf], sol[nf]
                face_resid = mff @ sol - rhs - nu * tie
            else:
                tie = None
                sol, *_ = np.linalg.lstsq(mff, rhs, rcond=None)
                face_resid = mff @ sol - rhs
            noise_floor = 1e-12 * max(
                1.0, np.abs(rhs).max(), np.abs(mff).max() * (1.0 + np.abs(sol).max())
            )
            descent = np.zeros_like(sol)
            if np.abs(face_resid).max() > noise_floor and ratio_budget > 0:
                # no stationary point on this face: the objective falls along
                # a curvature-free direction; keep the sum tie and walk to the
                # nearest bound
                descent = -face_resid
                if tie is not None and tie.any():
                    descent = descent - tie * (descent @ tie) / tie.sum()
            if np.abs(descent).max() > noise_floor:
                ratio_budget -= 1
                step_dir = np.zeros_like(candidate)
                step_dir[idx_free] = descent
                start = np.where(free, z, candidate)
                with np.errstate(divide="ignore", invalid="ignore"):
                    to_lo = np.where(step_dir < 0, (lower - start) / step_dir, np.inf)
                    to_hi = np.where(step_dir > 0, (upper - start) / step_dir, np.inf)
                ratios = np.minimum(to_lo, to_hi)
                ratios[~free] = np.inf
                j = int(np.argmin(ratios))
                if not np.isfinite(ratios[j]):
                    return None
                if step_dir[j] < 0:
                    pin_lo[j] = True
                else:
                    pin_hi[j] = True
                continue
            candidate[idx_free] = sol
            below = np.where(free & finite_lo, lower - candidate, -np.inf)
            above = np.where(free & finite_hi, candidate - upper, -np.inf)
            worst = max(below.max(), above.max())
            if worst > pad.max():
                if below.max() >= above.max():
                    pin_lo[int(np.argmax(below))] = True
                else:
                    pin_hi[int(np.argmax(above))] = True
                continue
            candidate = np.clip(candidate, lower, upper)
        # multiplier signs on the pinned coordinates
        g = m @ candidate + lin
        if use_sum:
            g = g - nu * sum_mask.astype(float)
        lo_viol = np.where(pin_lo & ~(sum_mask if frozen_sum else np.zeros(n, bool)), -g, -np.inf)
        hi_viol = np.where(pin_hi, g, -np.inf)
        worst_lo, worst_hi = lo_viol.max(), hi_viol.max()
        if max(worst_lo, worst_hi) <= kkt_tol:
            return candidate
        if worst_lo >= worst_hi:
            pin_lo[int(np.argmax(lo_viol))] = False
        else:
            pin_hi[int(np.argmax(hi_viol))] = False
    return None


def _box_face_polish(Q, b, lower, upper):
    def polish(z):
        return _active_set_candidate(Q, b, lower, upper, None, 0.0, z)

    return polish


def solve_box_qp(qp, tol=1e-10, max_iter=10000):
    """Solve a box QP; non-convergence is reported on the result, not raised."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    lip = _sym_max_eig(qp.Q)

    def project(z):
        return np.clip(z, qp.lower, qp.upper)

    return _projected_gradient(
        lambda z: qp.Q @ z,
        qp.b,
        project,
        np.zeros_like(qp.b),
        lip,
        tol,
        max_iter,
        polish=_box_face_polish(qp.Q, qp.b, qp.lower, qp.upper),
    )


# ---------------------------------------------------------------------------
# stationarity QP


@dataclass
class TerminationQP:
    """Data of the gradient-combination QP behind the stationarity estimate.

    ``grad_obj`` stacks the most recent objective gradients as columns;
    ``grad_cons`` holds one such matrix per constraint, and ``con_values``
    the constraint values at the current iterate.  ``mu`` is the current
    penalty parameter; the objective weights live on the simplex scaled
    to ``mu`` while each constraint block is box-constrained to [0, 1].
    """

    grad_obj: np.ndarray
    grad_cons: list = field(default_factory=list)
    con_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hessian: InverseHessian = None
    mu: float = 1.0

    def __post_init__(self):
        self.grad_obj = np.atleast_2d(np.asarray(self.grad_obj, dtype=float))
        self.grad_cons = [np.atleast_2d(np.asarray(j, dtype=float)) for j in self.grad_cons]
        self.con_values = np.atleast_1d(np.asarray(self.con_values, dtype=float))
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if len(self.grad_cons) != self.con_values.size:
            raise ValueError("one value per constraint gradient history is required")
        n, l = self.grad_obj.shape
        for j in self.grad_cons:
            if j.shape != (n, l):
                raise ValueError("constraint history shape disagrees with objective history")
        if self.hessian is None:
            self.hessian = InverseHessian(n)


@dataclass
class TerminationResult:
    sigma: np.ndarray
    lam: np.ndarray
    direction: np.ndarray
    stationarity: float
    iterations: int
    converged: bool
    residual: float


def solve_termination_qp(tqp, tol=1e-10, max_iter=10000, z0=None):
    """Solve the stationarity QP and recover the combined direction.

    Returns the simplex weights on the objective gradients, the box weights
    on the constraint gradients, and the inverse-Hessian image of their
    combination, whose norm is the stationarity estimate.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n, l = tqp.grad_obj.shape
    p = len(tqp.grad_cons)
    columns = [tqp.grad_obj] + tqp.grad_cons
    a = np.hstack(columns)  # n x (l * (1 + p))
    wa = np.column_stack([tqp.hessian.apply(a[:, j]) for j in range(a.shape[1])])
    m = a.T @ wa
    # the column-wise products leave machine-level asymmetry and indefiniteness
    # that stall the iteration; symmetrize and lift well below the tolerance
    m = 0.5 * (m + m.T)
    lift = 1e-13 * max(_sym_max_eig(m), 1.0)
    m[np.diag_indices_from(m)] += lift
    lin = np.concatenate([np.zeros(l)] + [-c * np.ones(l) for c in tqp.con_values])

    def project(z):
        out = np.empty_like(z)
        out[:l] = project_scaled_simplex(z[:l], tqp.mu)
        if p:
            out[l:] = np.clip(z[l:], 0.0, 1.0)
        return out

    if z0 is None:
        z0 = np.zeros(l * (1 + p))
    else:
        z0 = np.asarray(z0, dtype=float)
        if z0.size != l * (1 + p):
            raise ValueError("warm start has the wrong dimension")

    lower = np.zeros(l * (1 + p))
    upper = np.concatenate([np.full(l, np.inf), np.ones(l * p)])
    sum_mask = np.zeros(l * (1 + p), dtype=bool)
    sum_mask[:l] = True

    def polish(z):
        candidate = _active_set_candidate(m, lin, lower, upper, sum_mask, tqp.mu, z)
        return None if candidate is None else project(candidate)

    res = _projected_gradient(
        lambda z: m @ z, lin, project, z0, _sym_max_eig(m), tol, max_iter, polish=polish
    )
    z = res.x
    direction = tqp.hessian.apply(a @ z)
    return TerminationResult(
        sigma=z[:l].copy(),
        lam=z[l:].copy(),
        direction=direction,
        stationarity=float(np.linalg.norm(direction)),
        iterations=res.iterations,
        converged=res.converged,
        residual=res.residual,
    )
