"""Tiny MLP classifier with hand-written backprop plus desk-scale datasets.

Everything is plain numpy so gradients are exact, deterministic, and cheap
to finite-difference.  Hidden activations are exposed for the feature-space
distance, and reverse mode accepts cotangents on both the logits and the
hidden layers.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .qp import project_l2_ball, project_linf_box

ACTIVATIONS = ("tanh", "relu")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_deriv(name, z):
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    # relu subgradient at 0 taken as 0
    return (z > 0.0).astype(float)


class MLP:
    """Fully-connected classifier; final layer is linear (logits)."""

    def __init__(self, layer_dims, activation="tanh", seed=0):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dimensions")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_dims = list(int(d) for d in layer_dims)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_out, fan_in))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    def copy(self):
        out = MLP(self.layer_dims, self.activation)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    # -- forward ----------------------------------------------------------

    def _forward_trace(self, x):
        """Pre-activations and activations for every layer; x is (n,) or (N, n)."""
        a = np.asarray(x, dtype=float)
        pre, post = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            pre.append(z)
            if i < len(self.weights) - 1:
                a = _act(self.activation, z)
                post.append(a)
        return pre, post

    def forward(self, x):
        """Logits for a single input or a batch."""
        pre, _ = self._forward_trace(x)
        return pre[-1]

    def hidden_features(self, x):
        """Concatenation of all post-activation hidden layers (single input)."""
        _, post = self._forward_trace(np.asarray(x, dtype=float))
        if not post:
            return np.zeros(0)
        return np.concatenate(post)

    def predict(self, x):
        logits = self.forward(x)
        return np.argmax(logits, axis=-1)

    # -- reverse mode ------------------------------------------------------

    def input_backward(self, x, logit_cotangent, hidden_cotangents=None):
        """Gradient w.r.t. the input of a scalar with the given cotangents.

        ``hidden_cotangents``, when given, is one vector per hidden layer
        (cotangent on the post-activation values).
        """
        x = np.asarray(x, dtype=float)
        pre, _ = self._forward_trace(x)
        n_hidden = len(self.weights) - 1
        if hidden_cotangents is None:
            hidden_cotangents = [None] * n_hidden
        delta = np.asarray(logit_cotangent, dtype=float)
        for i in range(len(self.weights) - 1, -1, -1):
            upstream = delta @ self.weights[i]
            if i == 0:
                return upstream
            if hidden_cotangents[i - 1] is not None:
                upstream = upstream + hidden_cotangents[i - 1]
            delta = upstream * _act_deriv(self.activation, pre[i - 1])

    def parameter_backward(self, x, logit_cotangent):
        """Per-layer weight and bias gradients for a batch of cotangents."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        delta = np.atleast_2d(np.asarray(logit_cotangent, dtype=float))
        pre, post = self._forward_trace(x)
        acts = [x] + post
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = delta.T @ acts[i]
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * _act_deriv(self.activation, pre[i - 1])
        return grads_w, grads_b

    # -- persistence -------------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": 1,
            "layer_dims": self.layer_dims,
            "activation": self.activation,
            "weights": [w.flatten().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, payload):
        if payload.get("schema_version") != 1:
            raise ValueError("unsupported checkpoint schema version")
        out = cls(payload["layer_dims"], payload["activation"])
        for i, (w, b) in enumerate(zip(payload["weights"], payload["biases"])):
            shape = out.weights[i].shape
            out.weights[i] = np.asarray(w, dtype=float).reshape(shape)
            out.biases[i] = np.asarray(b, dtype=float)
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# losses and heads


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y):
    """log-sum-exp stabilized softmax cross-entropy; single sample."""
    logits = np.asarray(logits, dtype=float)
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - logits[y])


def cross_entropy_head(y):
    """Head returning (loss, d loss / d logits)."""

    def head(logits):
        value = cross_entropy(logits, y)
        grad = softmax(logits)
        grad[y] -= 1.0
        return value, grad

    return head


def logit_head(i):
    def head(logits):
        grad = np.zeros_like(logits)
        grad[i] = 1.0
        return float(logits[i]), grad

    return head


def input_gradient(model, x, head):
    """Reverse-mode input gradient of ``head(forward(x))``."""
    logits = model.forward(x)
    _, dlogits = head(logits)
    return model.input_backward(x, dlogits)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    n_classes: int
    seed: int
    name: str = "blobs"


BLOB_CENTERS = np.array([[0.25, 0.30], [0.75, 0.35], [0.50, 0.78]])


def gaussian_blobs(seed=0, n_train=500, n_val=200, spread=0.09, centers=None):
    """Three (by default) Gaussian classes inside the unit square."""
    centers = BLOB_CENTERS if centers is None else np.asarray(centers, dtype=float)
    n_classes = centers.shape[0]
    rng = np.random.default_rng(seed)

    def draw(n):
        ys = rng.integers(0, n_classes, size=n)
        xs = centers[ys] + rng.normal(0.0, spread, size=(n, centers.shape[1]))
        return np.clip(xs, 0.0, 1.0), ys

    train_x, train_y = draw(n_train)
    val_x, val_y = draw(n_val)
    return Dataset(train_x, train_y, val_x, val_y, n_classes, seed, "blobs")


def two_moons(seed=0, n_train=500, n_val=200, noise=0.06):
    """Two interleaved half-circles scaled into the unit square."""
    rng = np.random.default_rng(seed)

    def draw(n):
        ys = rng.integers(0, 2, size=n)
        t = rng.uniform(0.0, np.pi, size=n)
        xs = np.where(
            ys[:, None] == 0,
            np.column_stack([np.cos(t), np.sin(t)]),
            np.column_stack([1.0 - np.cos(t), 0.35 - np.sin(t)]),
        )
        xs = xs + rng.normal(0.0, noise, size=xs.shape)
        xs = (xs - np.array([-1.1, -0.8])) / np.array([3.2, 2.0])
        return np.clip(xs, 0.0, 1.0), ys

    train_x, train_y = draw(n_train)
    val_x, val_y = draw(n_val)
    return Dataset(train_x, train_y, val_x, val_y, 2, seed, "two_moons")


# ---------------------------------------------------------------------------
# training


def accuracy(model, x, y):
    return float(np.mean(model.predict(x) == y))


def _batch_ce_cotangent(logits, ys):
    probs = softmax(logits)
    probs[np.arange(len(ys)), ys] -= 1.0
    return probs / len(ys)


def _batch_ce_loss(logits, ys):
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(ys)), ys]))


@dataclass
class TrainReport:
    epochs: int
    train_accuracy: float
    val_accuracy: float
    final_loss: float
    diverged: bool = False
    loss_history: list = field(default_factory=list)


def train(model, dataset, epochs=200, lr=0.3, seed=0, batch_size=32):
    """Minibatch SGD on softmax cross-entropy; returns a new model.

    Fully deterministic for a fixed seed.  Divergence (non-finite loss)
    stops training and is flagged on the report.
    """
    out = model.copy()
    rng = np.random.default_rng(seed)
    n = dataset.train_x.shape[0]
    report = TrainReport(0, 0.0, 0.0, 0.0)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = dataset.train_x[idx], dataset.train_y[idx]
            logits = out.forward(xb)
            cot = _batch_ce_cotangent(logits, yb)
            gw, gb = out.parameter_backward(xb, cot)
            for i in range(len(out.weights)):
                out.weights[i] -= lr * gw[i]
                out.biases[i] -= lr * gb[i]
        loss = _batch_ce_loss(out.forward(dataset.train_x), dataset.train_y)
        report.loss_history.append(loss)
        if not np.isfinite(loss):
            report.diverged = True
            break
    report.epochs = epochs
    report.final_loss = report.loss_history[-1] if report.loss_history else float("nan")
    report.train_accuracy = accuracy(out, dataset.train_x, dataset.train_y)
    report.val_accuracy = accuracy(out, dataset.val_x, dataset.val_y)
    return out, report


def _inner_pgd_batch(model, xs, ys, eps, metric, steps, step_size, rng):
    """Budgeted inner maximization of cross-entropy for adversarial training.

    Steps are normalized (sign steps under the sup-norm budget, unit-norm
    steps under the Euclidean one) so saturated loss gradients still move.
    """
    deltas = rng.uniform(-eps, eps, size=xs.shape) if steps > 0 else np.zeros_like(xs)
    if metric == "l2":
        deltas = np.array([project_l2_ball(d, eps) for d in deltas])
    deltas = np.clip(xs + deltas, 0.0, 1.0) - xs
    for _ in range(steps):
        logits = model.forward(xs + deltas)
        cot = softmax(logits)
        cot[np.arange(len(ys)), ys] -= 1.0
        grads = np.array(
            [model.input_backward(xs[i] + deltas[i], cot[i]) for i in range(len(ys))]
        )
        if metric == "linf":
            prop = deltas + step_size * np.sign(grads)
            deltas = np.array(
                [project_linf_box(xs[i], eps, prop[i]) for i in range(len(ys))]
            )
        else:  # l2: unit-norm steps, then ball and image box
            norms = np.linalg.norm(grads, axis=1, keepdims=True)
            prop = deltas + step_size * grads / np.maximum(norms, 1e-12)
            deltas = np.array([project_l2_ball(d, eps) for d in prop])
            deltas = np.clip(xs + deltas, 0.0, 1.0) - xs
    return xs + deltas


def adversarial_train(
    model,
    dataset,
    eps,
    metric="linf",
    epochs=60,
    lr=0.3,
    seed=0,
    batch_size=32,
    inner_steps=10,
    inner_step_size=None,
    lr_decay=1.0,
    lr_decay_every=None,
):
    """Min-max training: budgeted inner attack, then a subgradient step.

    The outer update takes its gradient at the inner maximizers, which is
    only as useful as those maximizers are good; the inner budget is
    deliberately small and configurable.  A decaying learning rate lets the
    robust boundary settle instead of oscillating around the margin.
    """
    if metric not in ("linf", "l2"):
        raise ValueError("adversarial training supports linf or l2 budgets")
    if inner_step_size is None:
        inner_step_size = 2.5 * eps / max(inner_steps, 1)
    out = model.copy()
    rng = np.random.default_rng(seed)
    n = dataset.train_x.shape[0]
    report = TrainReport(0, 0.0, 0.0, 0.0)
    for epoch in range(epochs):
        lr_now = lr
        if lr_decay_every:
            lr_now = lr * lr_decay ** (epoch // lr_decay_every)
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = dataset.train_x[idx], dataset.train_y[idx]
            if eps > 0 and inner_steps > 0:
                xb = _inner_pgd_batch(out, xb, yb, eps, metric, inner_steps, inner_step_size, rng)
            logits = out.forward(xb)
            cot = _batch_ce_cotangent(logits, yb)
            gw, gb = out.parameter_backward(xb, cot)
            for i in range(len(out.weights)):
                out.weights[i] -= lr_now * gw[i]
                out.biases[i] -= lr_now * gb[i]
        loss = _batch_ce_loss(out.forward(dataset.train_x), dataset.train_y)
        report.loss_history.append(loss)
        if not np.isfinite(loss):
            report.diverged = True
            break
    report.epochs = epochs
    report.final_loss = report.loss_history[-1] if report.loss_history else float("nan")
    report.train_accuracy = accuracy(out, dataset.train_x, dataset.train_y)
    report.val_accuracy = accuracy(out, dataset.val_x, dataset.val_y)
    return out, report


# ---------------------------------------------------------------------------
# the one-dimensional inner-maximizer demonstration


DANSKIN_INNER_POINTS = {"stationary_zero": 0.0, "global_one": 1.0}


def danskin_example(theta, inner_solution):
    """Outer subgradient of ``max over x' in [-1,1] of max(theta x', 0)^2``.

    Differentiating through the chosen inner point: the interior stationary
    point ``x' = 0`` always yields 0 (a useless direction), while the
    maximizer ``x' = 1`` yields ``2 max(theta, 0)``, which actually makes
    progress on ``g(theta) = max(theta, 0)^2``.
    """
    try:
        x_inner = DANSKIN_INNER_POINTS[inner_solution]
    except KeyError:
        raise ValueError(f"unknown inner solution {inner_solution!r}") from None
    return 2.0 * max(theta * x_inner, 0.0) * x_inner
