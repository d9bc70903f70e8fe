"""Attack problem builders, the two-stage restart driver, and a PGD baseline.

Both robustness formulations are posed as nonsmooth constrained programs:
maximizing a (clipped) classification loss inside a distance budget, or
minimizing the perturbation distance subject to crossing the decision
boundary.  Constraint groups are folded so the solver sees at most three
scalar constraints regardless of the input dimension.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .folding import ClippedLoss, box_fold, linf_to_box, radius_rescale_factor
from .model import cross_entropy, softmax
from .penalty_sqp import NonsmoothProblem, SolverConfig, evaluate_problem, solve
from .qp import project_l1_ball, project_l2_ball, project_linf_box


class FormulationError(ValueError):
    """Requested combination is outside the supported formulation table."""


# ---------------------------------------------------------------------------
# metrics and attack specifications


@dataclass(frozen=True)
class Metric:
    kind: str  # "lp" | "perceptual"
    p: float = 2.0
    inner: str = "l2"  # inner norm of the feature-space distance

    def __post_init__(self):
        if self.kind == "lp":
            if not self.p >= 1:
                raise FormulationError("lp metrics need p >= 1")
        elif self.kind == "perceptual":
            if self.inner not in ("l1", "l2"):
                raise FormulationError("perceptual inner norm must be l1 or l2")
        else:
            raise FormulationError(f"unknown metric kind {self.kind!r}")

    @classmethod
    def l1(cls):
        return cls("lp", 1.0)

    @classmethod
    def l2(cls):
        return cls("lp", 2.0)

    @classmethod
    def linf(cls):
        return cls("lp", math.inf)

    @classmethod
    def lp(cls, p):
        return cls("lp", float(p))

    @classmethod
    def perceptual(cls, inner="l2"):
        return cls("perceptual", inner=inner)

    @property
    def name(self):
        if self.kind == "perceptual":
            return f"pd-{self.inner}"
        if self.p == math.inf:
            return "linf"
        if self.p == int(self.p):
            return f"l{int(self.p)}"
        return f"l{self.p:g}"

    @classmethod
    def from_name(cls, name):
        if name.startswith("pd-"):
            return cls.perceptual(name[3:])
        if name == "linf":
            return cls.linf()
        if name.startswith("l"):
            return cls.lp(float(name[1:]))
        raise FormulationError(f"cannot parse metric name {name!r}")


@dataclass(frozen=True)
class AttackSpec:
    """What to solve: formulation, distance metric, budget, and loss."""

    formulation: str  # "max_loss" | "min_radius"
    metric: Metric
    eps: float = None
    loss: ClippedLoss = None
    rescale: bool = True  # rebalance scalar-radius objectives by sqrt(n)

    def __post_init__(self):
        if self.formulation not in ("max_loss", "min_radius"):
            raise FormulationError(f"unknown formulation {self.formulation!r}")
        if self.formulation == "max_loss":
            if self.eps is None or not self.eps > 0:
                raise FormulationError("max_loss needs a positive budget eps")
            if self.loss is None:
                raise FormulationError("max_loss needs a loss")
        else:
            if self.eps is not None:
                raise FormulationError("min_radius takes no budget")

    @property
    def loss_name(self):
        return self.loss.base if self.loss is not None else ""


# ---------------------------------------------------------------------------
# losses and distances


def margin_loss(logits, y):
    """Largest wrong-class logit minus the true-class logit.

    Positive means the point is misclassified.  Ties among wrong classes
    resolve to the lowest index (also the gradient selection).
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 1 or logits.size < 2:
        raise ValueError("need a logit vector of length >= 2")
    if not 0 <= y < logits.size:
        raise ValueError(f"label {y} out of range")
    rival = _best_rival(logits, y)
    return float(logits[rival] - logits[y])


def _best_rival(logits, y):
    masked = logits.copy()
    masked[y] = -np.inf
    return int(np.argmax(masked))


def margin_head(y):
    """Head returning (margin loss, d margin / d logits)."""

    def head(logits):
        rival = _best_rival(logits, y)
        grad = np.zeros_like(logits)
        grad[rival] = 1.0
        grad[y] = -1.0
        return float(logits[rival] - logits[y]), grad

    return head


def lp_distance(delta, p):
    """Value and subgradient of ``||delta||_p``; the origin maps to zero."""
    delta = np.asarray(delta, dtype=float)
    if p == 1.0:
        return float(np.abs(delta).sum()), np.sign(delta)
    if p == math.inf:
        value = float(np.abs(delta).max()) if delta.size else 0.0
        grad = np.zeros_like(delta)
        if value > 0.0:
            i = int(np.argmax(np.abs(delta)))
            grad[i] = np.sign(delta[i])
        return value, grad
    value = float(np.sum(np.abs(delta) ** p) ** (1.0 / p))
    if value == 0.0:
        return 0.0, np.zeros_like(delta)
    grad = np.sign(delta) * (np.abs(delta) / value) ** (p - 1.0)
    return value, grad


def perceptual_distance(model, x, x_prime, inner="l2"):
    """Distance between concatenated hidden features, with its gradient.

    Returns ``(value, gradient w.r.t. x_prime)``; symmetric in its value and
    zero (with zero gradient) when the feature embeddings coincide.
    """
    if inner not in ("l1", "l2"):
        raise ValueError("inner norm must be l1 or l2")
    feats_x = model.hidden_features(x)
    feats_xp = model.hidden_features(x_prime)
    diff = feats_xp - feats_x
    if inner == "l2":
        value = float(np.linalg.norm(diff))
        cot = diff / value if value > 0.0 else np.zeros_like(diff)
    else:
        value = float(np.abs(diff).sum())
        cot = np.sign(diff)
    if value == 0.0:
        return 0.0, np.zeros_like(np.asarray(x_prime, dtype=float))
    hidden_dims = model.layer_dims[1:-1]
    blocks, start = [], 0
    for width in hidden_dims:
        blocks.append(cot[start : start + width])
        start += width
    grad = model.input_backward(x_prime, np.zeros(model.n_classes), hidden_cotangents=blocks)
    return value, grad


def _distance_of(model, spec, x, x_prime):
    if spec.metric.kind == "perceptual":
        return perceptual_distance(model, x, x_prime, spec.metric.inner)[0]
    return lp_distance(x_prime - x, spec.metric.p)[0]


# ---------------------------------------------------------------------------
# problem builders


@dataclass
class RadiusVariables:
    """Split view of a min-radius iterate: the image point plus radius block."""

    x_prime: np.ndarray
    t: object = None  # scalar, vector, or None when the metric needs no block


@dataclass
class AttackProblem:
    """A built attack instance: the solver-facing program plus bookkeeping."""

    problem: NonsmoothProblem
    spec: AttackSpec
    model: object
    x: np.ndarray
    y: int
    init_noise_scale: float = 1e-2
    _t_kind: str = "none"  # "none" | "scalar" | "vector"

    @property
    def n(self):
        return self.x.size

    def split(self, z):
        z = np.asarray(z, dtype=float)
        if self._t_kind == "scalar":
            return RadiusVariables(z[: self.n].copy(), float(z[self.n]))
        if self._t_kind == "vector":
            return RadiusVariables(z[: self.n].copy(), z[self.n :].copy())
        return RadiusVariables(z.copy(), None)

    def x_prime_of(self, z):
        return self.split(z).x_prime

    def radius_of(self, z):
        """Metric distance recomputed directly from the image-space point."""
        return _distance_of(self.model, self.spec, self.x, self.x_prime_of(z))

    def initial_point(self, rng):
        """Original point plus small uniform noise, clipped to the image box."""
        noise = rng.uniform(-self.init_noise_scale, self.init_noise_scale, size=self.n)
        xp0 = np.clip(self.x + noise, 0.0, 1.0)
        if self._t_kind == "none":
            return xp0
        delta = np.abs(xp0 - self.x)
        if self._t_kind == "scalar":
            return np.concatenate([xp0, [delta.max() + 1e-3]])
        return np.concatenate([xp0, delta + 1e-3])

    def margin_at(self, z):
        return margin_loss(self.model.forward(self.x_prime_of(z)), self.y)

    def violation_at(self, z):
        ev = evaluate_problem(self.problem, np.asarray(z, dtype=float))
        return float(np.maximum(ev.ineq, 0.0).sum() + np.abs(ev.eq).sum())


def _loss_objective(model, y, loss):
    """Negated clipped attack loss (the solver minimizes)."""

    def objective(x_prime):
        logits = model.forward(x_prime)
        if loss.base == "margin":
            rival = _best_rival(logits, y)
            raw = float(logits[rival] - logits[y])
            if raw > loss.clip_at:
                return -loss.clip_at, np.zeros_like(x_prime)
            dlogits = np.zeros_like(logits)
            dlogits[rival] = 1.0
            dlogits[y] = -1.0
        else:
            raw = cross_entropy(logits, y)
            if raw > loss.clip_at:
                return -loss.clip_at, np.zeros_like(x_prime)
            dlogits = softmax(logits)
            dlogits[y] -= 1.0
        return -raw, -model.input_backward(x_prime, dlogits)

    return objective


def _boundary_constraint(model, y):
    """Decision-boundary constraint: true logit minus best rival, <= 0 at success."""

    def oracle(x_prime):
        logits = model.forward(x_prime)
        rival = _best_rival(logits, y)
        dlogits = np.zeros_like(logits)
        dlogits[y] = 1.0
        dlogits[rival] = -1.0
        value = float(logits[y] - logits[rival])
        return value, model.input_backward(x_prime, dlogits)

    return oracle


def _lp_budget_constraint(x, p, eps):
    def oracle(x_prime):
        value, grad = lp_distance(x_prime - x, p)
        return value - eps, grad

    return oracle


def _perceptual_budget_constraint(model, x, eps, inner):
    def oracle(x_prime):
        value, grad = perceptual_distance(model, x, x_prime, inner)
        return value - eps, grad

    return oracle


def _raw_box_constraints(n):
    """Unfolded image box: 2n linear constraints (ablation path)."""

    def lower(i):
        def oracle(xp):
            g = np.zeros(n)
            g[i] = -1.0
            return -xp[i], g

        return oracle

    def upper(i):
        def oracle(xp):
            g = np.zeros(n)
            g[i] = 1.0
            return xp[i] - 1.0, g

        return oracle

    return [lower(i) for i in range(n)] + [upper(i) for i in range(n)]


def _raw_linf_constraints(x, eps):
    n = x.size

    def above(i):
        def oracle(xp):
            g = np.zeros(n)
            g[i] = 1.0
            return xp[i] - x[i] - eps, g

        return oracle

    def below(i):
        def oracle(xp):
            g = np.zeros(n)
            g[i] = -1.0
            return x[i] - xp[i] - eps, g

        return oracle

    return [above(i) for i in range(n)] + [below(i) for i in range(n)]


def build_max_loss(model, x, y, spec, fold=True, init_noise_scale=1e-2):
    """Loss-maximization attack inside a distance budget.

    Variables are the perturbed point itself.  With folding (the default)
    the program carries exactly two scalar inequality groups: the distance
    budget and the image box.  ``fold=False`` keeps the raw per-coordinate
    constraints and exists for ablation.
    """
    x = np.asarray(x, dtype=float)
    if spec.formulation != "max_loss":
        raise FormulationError("spec is not a max_loss formulation")
    if np.any(x < 0) or np.any(x > 1):
        raise FormulationError("anchor point must lie in the image box")
    n = x.size
    metric = spec.metric

    constraints = []
    if metric.kind == "perceptual":
        constraints.append(_perceptual_budget_constraint(model, x, spec.eps, metric.inner))
    elif metric.p == math.inf:
        if fold:
            constraints.append(linf_to_box(x, spec.eps))
        else:
            constraints.extend(_raw_linf_constraints(x, spec.eps))
    else:
        constraints.append(_lp_budget_constraint(x, metric.p, spec.eps))
    if fold:
        constraints.append(box_fold())
    else:
        constraints.extend(_raw_box_constraints(n))

    problem = NonsmoothProblem(
        dim=n,
        objective=_loss_objective(model, y, spec.loss),
        inequality_constraints=constraints,
    )
    return AttackProblem(problem, spec, model, x, int(y), init_noise_scale, "none")


def build_min_radius(model, x, y, spec, init_noise_scale=1e-2):
    """Distance minimization subject to crossing the decision boundary.

    The sup-norm metric decouples into a scalar radius variable bounding
    every coordinate; the absolute-sum metric into one radius per
    coordinate.  Other metrics keep the distance itself as the objective;
    no radius-decoupled variant exists for them.
    """
    x = np.asarray(x, dtype=float)
    if spec.formulation != "min_radius":
        raise FormulationError("spec is not a min_radius formulation")
    n = x.size
    metric = spec.metric

    if metric.kind == "lp" and metric.p == math.inf:
        scale = radius_rescale_factor(n) if spec.rescale else 1.0

        def objective(z):
            grad = np.zeros(n + 1)
            grad[n] = scale
            return scale * z[n], grad

        def dist_fold(z):
            xp, t = z[:n], z[n]
            upper = np.maximum(xp - x - t, 0.0)
            lower = np.maximum(x - xp - t, 0.0)
            value = float(np.sqrt(upper @ upper + lower @ lower))
            grad = np.zeros(n + 1)
            if value > 0.0:
                grad[:n] = (upper - lower) / value
                grad[n] = -(upper.sum() + lower.sum()) / value
            return value, grad

        t_kind, dim = "scalar", n + 1
    elif metric.kind == "lp" and metric.p == 1.0:

        def objective(z):
            grad = np.zeros(2 * n)
            grad[n:] = 1.0
            return float(z[n:].sum()), grad

        def dist_fold(z):
            xp, t = z[:n], z[n:]
            upper = np.maximum(xp - x - t, 0.0)
            lower = np.maximum(x - xp - t, 0.0)
            value = float(np.sqrt(upper @ upper + lower @ lower))
            grad = np.zeros(2 * n)
            if value > 0.0:
                grad[:n] = (upper - lower) / value
                grad[n:] = -(upper + lower) / value
            return value, grad

        t_kind, dim = "vector", 2 * n
    else:
        if metric.kind == "perceptual":

            def objective(z):
                return perceptual_distance(model, x, z, metric.inner)

        else:
            p = metric.p

            def objective(z):
                return lp_distance(z - x, p)

        dist_fold = None
        t_kind, dim = "none", n

    boundary = _boundary_constraint(model, y)
    box = box_fold()

    def lift(oracle):
        # image-space oracle applied to the x' block of an extended variable
        def lifted(z):
            value, grad_xp = oracle(z[:n])
            grad = np.zeros(dim)
            grad[:n] = grad_xp
            return value, grad

        return lifted

    if t_kind == "none":
        constraints = [boundary, box]
    else:
        constraints = [dist_fold, lift(boundary), lift(box)]

    problem = NonsmoothProblem(dim=dim, objective=objective, inequality_constraints=constraints)
    return AttackProblem(problem, spec, model, x, int(y), init_noise_scale, t_kind)


# ---------------------------------------------------------------------------
# two-stage restarts


@dataclass
class TwoStageConfig:
    restarts: int = 10  # R
    stage1_iters: int = 20  # k
    stage2_iters: int = 400  # K
    init_noise_scale: float = 1e-2

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if not 1 <= self.stage1_iters <= self.stage2_iters:
            raise ValueError("need 1 <= stage1_iters <= stage2_iters")


@dataclass
class TwoStageResult:
    best: object  # SolverReport of the full run
    stage1: list  # truncated SolverReports
    winner: int
    inits: list


def screen_stage1(reports, tau_viol):
    """Pick the restart to continue: feasible with least objective, else least violation."""
    if not reports:
        raise ValueError("no stage-1 results to screen")
    feasible = [i for i, r in enumerate(reports) if r.violation <= tau_viol]
    if feasible:
        return min(feasible, key=lambda i: reports[i].f_star)
    return min(range(len(reports)), key=lambda i: reports[i].violation)


def two_stage_solve(attack, two_stage, solver_cfg=SolverConfig(), seed=0):
    """Short seeded runs, screen for the best initialization, then one full run.

    Initial-scaling of the inverse Hessian is forced off so the full run
    replays the winning truncated run exactly over its first iterations.
    """
    attack.init_noise_scale = two_stage.init_noise_scale
    stage1_cfg = solver_cfg.variant(
        max_iter=two_stage.stage1_iters, h0_scaling=False, record_trajectory=True
    )
    stage2_cfg = solver_cfg.variant(max_iter=two_stage.stage2_iters, h0_scaling=False)

    entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = entropy.spawn(two_stage.restarts)
    inits, reports = [], []
    for child in children:
        x0 = attack.initial_point(np.random.default_rng(child))
        inits.append(x0)
        reports.append(solve(attack.problem, x0, stage1_cfg))
    winner = screen_stage1(reports, solver_cfg.tau_viol)
    best = solve(attack.problem, inits[winner], stage2_cfg)
    return TwoStageResult(best=best, stage1=reports, winner=winner, inits=inits)


# ---------------------------------------------------------------------------
# attack records


@dataclass
class PerturbationRecord:
    """Per-sample attack outcome, as serialized by the experiment harness."""

    sample_id: int
    solver_tag: str  # "pwcf" | "pgd"
    loss: str
    metric: str
    eps: float  # None for min-radius runs
    objective_or_radius: float
    violation: float
    stationarity: float  # nan when the solver provides no estimate
    attack_success: bool
    sparsity: float  # None for an exactly-zero perturbation
    iterations: int
    wall_time_ms: float
    x_prime: np.ndarray = field(default=None, repr=False, compare=False)


def _sparsity_or_none(delta):
    from .analysis import sparsity_measure

    return sparsity_measure(delta)


def attack_sample(
    model, x, y, spec, two_stage, solver_cfg=SolverConfig(), seed=0, sample_id=0
):
    """Solve one attack instance with the penalty-SQP pipeline and record it."""
    t0 = time.perf_counter()
    if spec.formulation == "max_loss":
        attack = build_max_loss(model, x, y, spec)
    else:
        attack = build_min_radius(model, x, y, spec)
    result = two_stage_solve(attack, two_stage, solver_cfg, seed=seed)
    report = result.best
    xp = attack.x_prime_of(report.x_star)
    violation = attack.violation_at(report.x_star)
    margin = margin_loss(model.forward(xp), y)
    if spec.formulation == "max_loss":
        outcome = -report.f_star  # achieved (clipped) loss
    else:
        outcome = attack.radius_of(report.x_star)
    return PerturbationRecord(
        sample_id=sample_id,
        solver_tag="pwcf",
        loss=spec.loss_name,
        metric=spec.metric.name,
        eps=spec.eps,
        objective_or_radius=float(outcome),
        violation=float(violation),
        stationarity=float(report.stationarity),
        attack_success=bool(margin > 0.0 and violation <= solver_cfg.tau_viol),
        sparsity=_sparsity_or_none(xp - x),
        iterations=report.iterations,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        x_prime=xp,
    )


# ---------------------------------------------------------------------------
# PGD baseline


def _pgd_project(x, eps, p, proposal):
    """Feasible perturbation from a proposed one; exact for the sup norm.

    The Euclidean and absolute-sum budgets use sequential projection (ball,
    then box); both orders are feasible even where inexact, and clamping
    onto a box containing the origin never grows either norm.
    """
    if p == math.inf:
        return project_linf_box(x, eps, proposal)
    if p == 2.0:
        delta = project_l2_ball(proposal, eps)
        return np.clip(x + delta, 0.0, 1.0) - x
    delta = project_l1_ball(proposal, eps)
    delta = np.clip(x + delta, 0.0, 1.0) - x
    # final ball-then-box pass; a no-op in exact arithmetic
    delta = project_l1_ball(delta, eps)
    return np.clip(x + delta, 0.0, 1.0) - x


def _assert_pgd_feasible(x, delta, eps, p, tol=1e-9):
    if p == math.inf:
        norm = np.abs(delta).max() if delta.size else 0.0
    elif p == 2.0:
        norm = np.linalg.norm(delta)
    else:
        norm = np.abs(delta).sum()
    assert norm <= eps + tol, "projected iterate left the budget ball"
    assert np.all(x + delta >= -tol) and np.all(x + delta <= 1.0 + tol), (
        "projected iterate left the image box"
    )


def pgd_baseline(
    model, x, y, spec, steps=100, step_size=0.1, tau_viol=1e-2, sample_id=0
):
    """Plain projected-gradient ascent on the raw attack loss.

    Supported budgets are p = 1, 2, inf; every iterate is kept feasible by
    the corresponding projector.  Returns the iterate with the best margin.
    """
    t0 = time.perf_counter()
    if spec.formulation != "max_loss":
        raise FormulationError("the PGD baseline solves the max_loss formulation")
    if spec.metric.kind != "lp" or spec.metric.p not in (1.0, 2.0, math.inf):
        raise FormulationError("no projector for this metric; use the SQP pipeline")
    x = np.asarray(x, dtype=float)
    p, eps = spec.metric.p, spec.eps
    use_margin = spec.loss.base == "margin"

    delta = np.zeros_like(x)
    best_delta, best_margin = delta.copy(), margin_loss(model.forward(x), y)
    for _ in range(steps):
        xp = x + delta
        logits = model.forward(xp)
        if use_margin:
            rival = _best_rival(logits, y)
            dlogits = np.zeros_like(logits)
            dlogits[rival] = 1.0
            dlogits[y] = -1.0
        else:
            dlogits = softmax(logits)
            dlogits[y] -= 1.0
        grad = model.input_backward(xp, dlogits)
        delta = _pgd_project(x, eps, p, delta + step_size * grad)
        _assert_pgd_feasible(x, delta, eps, p)
        m = margin_loss(model.forward(x + delta), y)
        if m > best_margin:
            best_margin, best_delta = m, delta.copy()

    xp = x + best_delta
    # bookkeeping through the same constraint groups the SQP attack uses
    attack = build_max_loss(model, x, y, spec)
    violation = attack.violation_at(xp)
    margin = margin_loss(model.forward(xp), y)
    return PerturbationRecord(
        sample_id=sample_id,
        solver_tag="pgd",
        loss=spec.loss_name,
        metric=spec.metric.name,
        eps=eps,
        objective_or_radius=float(margin),
        violation=float(violation),
        stationarity=float("nan"),
        attack_success=bool(margin > 0.0 and violation <= tau_viol),
        sparsity=_sparsity_or_none(best_delta),
        iterations=steps,
        wall_time_ms=(time.perf_counter() - t0) * 1e3,
        x_prime=xp,
    )


def per_sample_seed(global_seed, sample_id):
    """Scheduling-independent per-sample seed."""
    return np.random.SeedSequence((global_seed, sample_id))
