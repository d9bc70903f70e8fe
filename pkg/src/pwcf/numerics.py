"""Dense vector arithmetic, inverse-Hessian maintenance and finite differences.

The inverse-Hessian approximation is kept either as a dense symmetric
positive-definite matrix or as a limited-memory ring buffer of curvature
pairs evaluated through the two-loop recursion.  Both modes expose the same
product interface, so the rest of the solver never needs to know which one
is active.
"""

from collections import deque

import numpy as np

# Curvature pairs with y's <= CURVATURE_SKIP * |s| |y| are dropped: applying
# them would destroy positive definiteness.
CURVATURE_SKIP = 1e-10


def _as_vector(v, dim=None, name="vector"):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} has dimension {v.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


class InverseHessian:
    """Inverse-Hessian approximation of the penalty function.

    Parameters
    ----------
    dim : int
        Variable dimension.
    memory : int or None
        ``None`` keeps a dense matrix; an integer switches to limited-memory
        mode with a ring buffer holding at most ``memory`` curvature pairs.
    """

    def __init__(self, dim, memory=None):
        if dim < 1:
            raise ValueError("dim must be positive")
        if memory is not None and memory < 1:
            raise ValueError("memory must be positive or None")
        self.dim = int(dim)
        self.memory = memory
        self.scale = 1.0  # multiplier on the identity seed
        if memory is None:
            self.matrix = np.eye(self.dim)
            self.pairs = None
        else:
            self.matrix = None
            self.pairs = deque(maxlen=int(memory))
        self.n_updates = 0

    @property
    def is_limited_memory(self):
        return self.pairs is not None

    def copy(self):
        out = InverseHessian(self.dim, self.memory)
        out.scale = self.scale
        out.n_updates = self.n_updates
        if self.is_limited_memory:
            out.pairs = deque(
                [(s.copy(), y.copy(), rho) for s, y, rho in self.pairs],
                maxlen=self.pairs.maxlen,
            )
            out.matrix = None
        else:
            out.matrix = self.matrix.copy()
        return out

    def rescale_identity(self, gamma):
        """Replace the identity seed by ``gamma * I``.

        Only legal before the first applied update; used by the optional
        initial-scaling heuristic, which stays off for warm starts.
        """
        if self.n_updates:
            raise ValueError("identity rescaling is only valid before any update")
        if not np.isfinite(gamma) or gamma <= 0:
            raise ValueError("gamma must be a positive finite scalar")
        self.scale = float(gamma)
        if not self.is_limited_memory:
            self.matrix = self.scale * np.eye(self.dim)

    def apply(self, g):
        """Return the product of the stored inverse with ``g``."""
        g = _as_vector(g, self.dim, "g")
        if not self.is_limited_memory:
            out = self.matrix @ g
        else:
            out = self._two_loop(g)
        if not np.all(np.isfinite(out)):
            raise ValueError("inverse-Hessian product is non-finite")
        return out

    def _two_loop(self, g):
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        r = self.scale * q
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ r)
            r += (a - b) * s
        return r

    def update(self, s, y):
        """Apply the inverse-BFGS update for the pair ``(s, y)``.

        Returns ``True`` when the update was applied and ``False`` when it
        was skipped by the curvature guard.
        """
        s = _as_vector(s, self.dim, "s")
        y = _as_vector(y, self.dim, "y")
        ys = y @ s
        if ys <= CURVATURE_SKIP * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        rho = 1.0 / ys
        if self.is_limited_memory:
            self.pairs.append((s.copy(), y.copy(), rho))
        else:
            w = self.matrix
            wy = w @ y
            # (I - rho s y^T) W (I - rho y s^T) + rho s s^T, kept symmetric
            new = w - rho * np.outer(s, wy) - rho * np.outer(wy, s)
            new += rho * rho * (y @ wy) * np.outer(s, s)
            new += rho * np.outer(s, s)
            self.matrix = 0.5 * (new + new.T)
        self.n_updates += 1
        return True

    def dense(self):
        """Materialize the stored operator as a dense matrix (tests only)."""
        if not self.is_limited_memory:
            return self.matrix.copy()
        cols = [self.apply(e) for e in np.eye(self.dim)]
        return np.column_stack(cols)


def bfgs_update(hessian, s, y):
    """Functional inverse-BFGS update; returns the input unchanged on skip."""
    out = hessian.copy()
    if out.update(s, y):
        return out
    return hessian


def apply_inverse_hessian(hessian, g):
    """Product of the stored inverse-Hessian approximation with ``g``."""
    return hessian.apply(g)


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar field.

    ``x`` may be a scalar or a 1-d array; the result has the same shape.
    Raises if the oracle produces a non-finite value at any probe point.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    scalar_input = np.isscalar(x) or np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(xp[0] if scalar_input else xp))
        fm = float(f(xm[0] if scalar_input else xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("oracle returned a non-finite value")
        grad[i] = (fp - fm) / (2.0 * h)
    return float(grad[0]) if scalar_input else grad
