"""Constraint folding, the box reformulation of sup-norm budgets, and loss clipping.

Folding turns a group of inequality and equality constraints into a single
nonnegative scalar that vanishes exactly on the group's feasible set, which
keeps the per-iteration QPs small.  Loss clipping caps an unbounded attack
loss at the value where success is already decided, so the penalty function
stays balanced against the constraint violation.
"""

import math
from dataclasses import dataclass

import numpy as np

AGGREGATORS = ("l2", "l1", "max")


@dataclass(frozen=True)
class FoldSpec:
    """How a group of constraints is folded into one scalar."""

    aggregator: str = "l2"

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")


def fold_constraints(ineq_values, eq_values, spec=FoldSpec()):
    """Aggregate constraint residuals into one scalar plus chain-rule weights.

    ``ineq_values`` are residuals with the ``c <= 0`` convention,
    ``eq_values`` residuals with ``h = 0``.  Returns ``(value, weights)``
    where ``weights`` (inequalities first, then equalities) satisfy
    ``grad value = sum_i weights[i] * grad residual_i``.  The value is zero
    exactly when every member constraint holds; at that point the weights
    are all zero, so feasible points are stationary for the folded term.
    """
    c = np.atleast_1d(np.asarray(ineq_values, dtype=float))
    h = np.atleast_1d(np.asarray(eq_values, dtype=float))
    if c.size + h.size == 0:
        raise ValueError("cannot fold an empty constraint group")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise ValueError("constraint residuals must be finite")

    zc = np.maximum(c, 0.0)
    zh = np.abs(h)
    z = np.concatenate([zc, zh])
    # d z / d residual: 1 on violated inequalities (c = 0 counts as inactive),
    # sign(h) on equalities.
    inner = np.concatenate([(c > 0.0).astype(float), np.sign(h)])

    agg = spec.aggregator
    if agg == "l2":
        value = float(np.linalg.norm(z))
        outer = z / value if value > 0.0 else np.zeros_like(z)
    elif agg == "l1":
        value = float(z.sum())
        outer = (z > 0.0).astype(float)
    else:  # max
        value = float(z.max())
        outer = np.zeros_like(z)
        if value > 0.0:
            outer[int(np.argmax(z))] = 1.0
    return value, outer * inner


def linf_to_box(x, eps):
    """Fold a sup-norm budget around ``x`` into one scalar constraint.

    The budget ``||x' - x||_inf <= eps`` is equivalent to the two box
    families ``x' - x <= eps`` and ``x - x' <= eps``; their folded residual is zero
    exactly on the budget set.  Returns an oracle mapping ``x'`` to
    ``(value, gradient w.r.t. x')``.
    """
    x = np.asarray(x, dtype=float)
    if eps <= 0:
        raise ValueError("eps must be positive")

    def oracle(x_prime):
        x_prime = np.asarray(x_prime, dtype=float)
        if x_prime.shape != x.shape:
            raise ValueError("dimension mismatch")
        upper = np.maximum(x_prime - x - eps, 0.0)
        lower = np.maximum(x - x_prime - eps, 0.0)
        value = float(np.sqrt(upper @ upper + lower @ lower))
        if value == 0.0:
            return 0.0, np.zeros_like(x)
        return value, (upper - lower) / value

    return oracle


def box_fold(lower=0.0, upper=1.0):
    """Fold componentwise bounds ``lower <= x' <= upper`` into one scalar."""

    def oracle(x_prime):
        x_prime = np.asarray(x_prime, dtype=float)
        below = np.maximum(lower - x_prime, 0.0)
        above = np.maximum(x_prime - upper, 0.0)
        value = float(np.sqrt(below @ below + above @ above))
        if value == 0.0:
            return 0.0, np.zeros_like(x_prime)
        return value, (above - below) / value

    return oracle


@dataclass(frozen=True)
class ClippedLoss:
    """An attack loss with an optional cap at its decision threshold."""

    base: str  # "cross_entropy" | "margin"
    clip_at: float

    def __post_init__(self):
        if self.base not in ("cross_entropy", "margin"):
            raise ValueError(f"unknown base loss {self.base!r}")

    @classmethod
    def margin(cls, clip_at=0.01):
        """Margin loss; positive already means success, so cap just above 0."""
        return cls("margin", clip_at)

    @classmethod
    def cross_entropy(cls, n_classes):
        """Cross-entropy loss capped at ln(number of classes).

        Beyond that value the true-class probability is below uniform, so
        the attack has already succeeded.
        """
        if n_classes < 2:
            raise ValueError("need at least two classes")
        return cls("cross_entropy", math.log(n_classes))

    @classmethod
    def unclipped(cls, base):
        return cls(base, math.inf)


def clip_loss(loss, raw_value, raw_grad):
    """Cap a raw loss value and zero its gradient beyond the cap."""
    if raw_value > loss.clip_at:
        return loss.clip_at, np.zeros_like(np.asarray(raw_grad, dtype=float))
    return raw_value, np.asarray(raw_grad, dtype=float)


def radius_rescale_factor(n):
    """Constant multiplier that rebalances a scalar radius objective.

    A scalar radius sits around 1e-2 while a folded constraint over n
    coordinates scales like sqrt(n); minimizing ``radius * sqrt(n)``
    keeps the two comparable.
    """
    if n < 1:
        raise ValueError("n must be positive")
    return math.sqrt(n)
