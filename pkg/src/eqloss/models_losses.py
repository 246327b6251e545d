"""Hypothesis classes and original losses with analytic gradients in theta.

Models
------
* ``linear``: binary margin model, prediction theta^T x, label in {-1, +1}.
* ``probabilistic``: logistic-linked linear model, q = sigma(theta^T x).
* ``multiclass``: one score theta_k^T x per class, labels in {1..K}.
* ``kernel``: regressor sum_i theta_i K(x_i, x) over a fixed anchor set.

All binary margin losses are functions of the margin s = y * theta^T x and
are exposed both in sample form (``loss``/``loss_grad``) and in scalar form
(``loss_on_margin``/``dloss_dmargin``); the scalar form is what the
equivalent-loss machinery integrates against. The cross-entropy loss is the
probabilistic counterpart, a function of q with a label branch.

Gradients are analytic everywhere, with subgradient 0 at hinge kinks. The
parameter vector lives in the Euclidean ball of radius ``m_theta`` and is
re-projected there after every update step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

EPS_Q = 1e-12

BINARY_MARGIN_LOSSES = ("squared_margin", "logistic", "margin", "exponential")
LOSS_KINDS = BINARY_MARGIN_LOSSES + (
    "cross_entropy",
    "squared_error",
    "multiclass_cross_entropy",
    "multiclass_margin",
)

LossKind = Literal[
    "cross_entropy",
    "squared_margin",
    "logistic",
    "margin",
    "exponential",
    "squared_error",
    "multiclass_cross_entropy",
    "multiclass_margin",
]
ModelKind = Literal["linear", "probabilistic", "multiclass", "kernel"]


def label_kind_for(kind: str) -> str:
    if kind in BINARY_MARGIN_LOSSES or kind == "cross_entropy":
        return "binary"
    if kind == "squared_error":
        return "regression"
    if kind in ("multiclass_cross_entropy", "multiclass_margin"):
        return "multiclass"
    raise ValueError(f"unknown loss kind {kind!r}")


@dataclass(frozen=True)
class ParamVector:
    """Parameter vector constrained to the ball ||theta||_2 <= m_theta."""

    theta: np.ndarray
    m_theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        if self.m_theta <= 0.0:
            raise ValueError(f"m_theta must be > 0, got {self.m_theta}")
        norm = float(np.linalg.norm(self.theta))
        if norm > self.m_theta * (1.0 + 1e-12):
            raise ValueError(f"||theta|| = {norm} exceeds the bound {self.m_theta}")

    def updated(self, new_theta: np.ndarray) -> "ParamVector":
        """Return a new ParamVector with ``new_theta`` projected into the ball."""
        return ParamVector(project_to_ball(new_theta, self.m_theta), self.m_theta)


def project_to_ball(theta: np.ndarray, m_theta: float) -> np.ndarray:
    """Euclidean projection onto {theta : ||theta||_2 <= m_theta}."""
    theta = np.asarray(theta, dtype=float)
    norm = float(np.linalg.norm(theta))
    if norm <= m_theta:
        return theta
    return theta * (m_theta / norm)


@dataclass(frozen=True)
class LabeledSample:
    """A feature vector with its label; y is -1/+1, a class in 1..K, or a real."""

    x: np.ndarray
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))


@dataclass(frozen=True)
class LossSpec:
    """Tagged selection of an original loss; kind must match the label kind."""

    kind: LossKind
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if label_kind_for(self.kind) == "multiclass" and self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")

    @property
    def label_kind(self) -> str:
        return label_kind_for(self.kind)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel regressor context: anchor points and the kernel on them.

    ``bandwidth`` only applies to the RBF kernel; when None it is set by the
    median heuristic over the anchors' pairwise distances.
    """

    kind: Literal["linear", "polynomial", "rbf"]
    anchors: np.ndarray
    bandwidth: float | None = None
    degree: int = 3
    coef: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "anchors", np.asarray(self.anchors, dtype=float))
        if self.kind == "rbf" and self.bandwidth is None:
            object.__setattr__(self, "bandwidth", median_bandwidth(self.anchors))


def median_bandwidth(points: np.ndarray) -> float:
    """Median pairwise Euclidean distance, floored away from zero."""
    points = np.asarray(points, dtype=float)
    diffs = points[:, None, :] - points[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=-1))
    upper = dists[np.triu_indices(len(points), k=1)]
    med = float(np.median(upper)) if upper.size else 1.0
    return max(med, 1e-12)


def kernel_matrix(spec: KernelSpec, rows: np.ndarray) -> np.ndarray:
    """K(anchor_i, row_j) with shape (n_anchors, n_rows)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    inner = spec.anchors @ rows.T
    if spec.kind == "linear":
        return inner
    if spec.kind == "polynomial":
        return (inner + spec.coef) ** spec.degree
    if spec.kind == "rbf":
        sq = (
            (spec.anchors**2).sum(axis=1)[:, None]
            + (rows**2).sum(axis=1)[None, :]
            - 2.0 * inner
        )
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * spec.bandwidth**2))
    raise ValueError(f"unknown kernel kind {spec.kind!r}")


def sigmoid(z):
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    if out.ndim == 0:
        return float(out)
    return out


def clamp_prob(q):
    """Clamp probabilities to [EPS_Q, 1 - EPS_Q]; cross-entropy diverges at 0/1."""
    return np.clip(q, EPS_Q, 1.0 - EPS_Q)


def predict(model_kind: ModelKind, theta: np.ndarray, x: np.ndarray, *, n_classes: int = 2, kernel: KernelSpec | None = None):
    """Model prediction at ``x``.

    linear -> margin theta^T x; probabilistic -> q = sigma(theta^T x) clamped;
    multiclass -> score vector (theta reshaped to (K, d)); kernel ->
    sum_i theta_i K(anchor_i, x).
    """
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    if model_kind == "linear":
        if theta.shape != x.shape:
            raise ValueError(f"dimension mismatch: theta {theta.shape} vs x {x.shape}")
        return float(theta @ x)
    if model_kind == "probabilistic":
        if theta.shape != x.shape:
            raise ValueError(f"dimension mismatch: theta {theta.shape} vs x {x.shape}")
        return float(clamp_prob(sigmoid(theta @ x)))
    if model_kind == "multiclass":
        if theta.size % n_classes != 0:
            raise ValueError(f"theta size {theta.size} not divisible by {n_classes} classes")
        scores = theta.reshape(n_classes, -1)
        if scores.shape[1] != x.size:
            raise ValueError(f"dimension mismatch: per-class dim {scores.shape[1]} vs x {x.size}")
        return scores @ x
    if model_kind == "kernel":
        if kernel is None:
            raise ValueError("kernel model requires a KernelSpec")
        k = kernel_matrix(kernel, x[None, :])[:, 0]
        if theta.shape != k.shape:
            raise ValueError(f"dimension mismatch: theta {theta.shape} vs anchors {k.shape}")
        return float(theta @ k)
    raise ValueError(f"unknown model kind {model_kind!r}")


# ----------------------------------------------------------------------
# Scalar loss curves (margin form s = y * theta^T x, probability form q)
# ----------------------------------------------------------------------

def loss_on_margin(kind: str, s):
    """Binary margin loss value as a function of the margin s."""
    s = np.asarray(s, dtype=float)
    if kind == "squared_margin":
        out = np.maximum(0.0, 1.0 - s) ** 2
    elif kind == "logistic":
        out = np.logaddexp(0.0, -s)
    elif kind == "margin":
        out = np.maximum(0.0, 1.0 - s)
    elif kind == "exponential":
        out = np.exp(-s)
    else:
        raise ValueError(f"{kind!r} is not a binary margin loss")
    if out.ndim == 0:
        return float(out)
    return out


def dloss_dmargin(kind: str, s):
    """d loss / d s for binary margin losses, subgradient 0 at kinks."""
    s = np.asarray(s, dtype=float)
    if kind == "squared_margin":
        out = -2.0 * np.maximum(0.0, 1.0 - s)
    elif kind == "logistic":
        out = -np.asarray(sigmoid(-s))
    elif kind == "margin":
        out = np.where(s < 1.0, -1.0, 0.0)
    elif kind == "exponential":
        out = -np.exp(-s)
    else:
        raise ValueError(f"{kind!r} is not a binary margin loss")
    if out.ndim == 0:
        return float(out)
    return out


def loss_on_prob(q, y):
    """Cross-entropy as a function of the predicted probability q and label y."""
    q = clamp_prob(np.asarray(q, dtype=float))
    out = np.where(y > 0, -np.log(q), -np.log1p(-q))
    if out.ndim == 0:
        return float(out)
    return out


def dloss_dprob(q, y):
    """d cross-entropy / d q at label y."""
    q = clamp_prob(np.asarray(q, dtype=float))
    out = np.where(y > 0, -1.0 / q, 1.0 / (1.0 - q))
    if out.ndim == 0:
        return float(out)
    return out


# ----------------------------------------------------------------------
# Sample-level losses and analytic gradients in theta
# ----------------------------------------------------------------------

def _xy(sample) -> tuple[np.ndarray, float]:
    if isinstance(sample, LabeledSample):
        return sample.x, sample.y
    x, y = sample
    return np.asarray(x, dtype=float), y


def loss(spec: LossSpec, theta: np.ndarray, sample, *, kernel: KernelSpec | None = None) -> float:
    """Original loss l(theta; (x, y)) for the configured kind."""
    theta = np.asarray(theta, dtype=float)
    x, y = _xy(sample)
    kind = spec.kind
    if kind == "cross_entropy":
        q = predict("probabilistic", theta, x)
        return float(loss_on_prob(q, y))
    if kind in BINARY_MARGIN_LOSSES:
        s = y * predict("linear", theta, x)
        return float(loss_on_margin(kind, s))
    if kind == "squared_error":
        model = "kernel" if kernel is not None else "linear"
        pred = predict(model, theta, x, kernel=kernel)
        return float((pred - y) ** 2)
    scores = predict("multiclass", theta, x, n_classes=spec.n_classes)
    y_idx = int(y) - 1
    if not 0 <= y_idx < spec.n_classes:
        raise ValueError(f"class label {y} outside 1..{spec.n_classes}")
    if kind == "multiclass_cross_entropy":
        m = float(np.max(scores))
        return float(m + np.log(np.sum(np.exp(scores - m))) - scores[y_idx])
    if kind == "multiclass_margin":
        rival = np.delete(scores, y_idx)
        return float(max(0.0, 1.0 + float(np.max(rival)) - scores[y_idx]))
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(spec: LossSpec, theta: np.ndarray, sample, *, kernel: KernelSpec | None = None) -> np.ndarray:
    """Analytic gradient of ``loss`` in theta (subgradient 0 at kinks)."""
    theta = np.asarray(theta, dtype=float)
    x, y = _xy(sample)
    kind = spec.kind
    if kind == "cross_entropy":
        q = sigmoid(float(theta @ x))
        return (q - (1.0 if y > 0 else 0.0)) * x
    if kind in BINARY_MARGIN_LOSSES:
        s = y * float(theta @ x)
        return float(dloss_dmargin(kind, s)) * y * x
    if kind == "squared_error":
        if kernel is not None:
            k = kernel_matrix(kernel, x[None, :])[:, 0]
            return 2.0 * (float(theta @ k) - y) * k
        return 2.0 * (float(theta @ x) - y) * x
    scores = predict("multiclass", theta, x, n_classes=spec.n_classes)
    y_idx = int(y) - 1
    grad = np.zeros((spec.n_classes, x.size))
    if kind == "multiclass_cross_entropy":
        m = float(np.max(scores))
        p = np.exp(scores - m)
        p /= p.sum()
        p[y_idx] -= 1.0
        grad[:] = p[:, None] * x[None, :]
        return grad.ravel()
    if kind == "multiclass_margin":
        rival_scores = scores.copy()
        rival_scores[y_idx] = -np.inf
        k_star = int(np.argmax(rival_scores))  # argmax keeps the lowest index on ties
        violation = 1.0 + scores[k_star] - scores[y_idx]
        if violation > 0.0:
            grad[k_star] = x
            grad[y_idx] = -x
        return grad.ravel()
    raise ValueError(f"unknown loss kind {kind!r}")


def empirical_gradient_bound(
    spec: LossSpec,
    xs: np.ndarray,
    m_theta: float,
    n_draws: int = 10_000,
    seed: int = 0,
    *,
    kernel: KernelSpec | None = None,
) -> float:
    """Empirical G: max ||loss_grad|| over random (theta in ball, sample) pairs.

    Samples theta uniformly on spheres of random radius <= m_theta, features
    from ``xs`` (rows), and labels uniformly from the loss's label set; for
    regression the observed y is drawn in [-1, 1].
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    rng = np.random.Generator(np.random.Philox(seed))
    if spec.label_kind == "multiclass":
        dim = xs.shape[1] * spec.n_classes
    elif kernel is not None:
        dim = kernel.anchors.shape[0]
    else:
        dim = xs.shape[1]
    best = 0.0
    for _ in range(n_draws):
        g = rng.standard_normal(dim)
        theta = g / max(np.linalg.norm(g), 1e-300) * m_theta * rng.uniform() ** (1.0 / dim)
        x = xs[rng.integers(len(xs))]
        if spec.label_kind == "binary":
            y = -1.0 if rng.uniform() < 0.5 else 1.0
        elif spec.label_kind == "multiclass":
            y = float(rng.integers(1, spec.n_classes + 1))
        else:
            y = float(rng.uniform(-1.0, 1.0))
        best = max(best, float(np.linalg.norm(loss_grad(spec, theta, (x, y), kernel=kernel))))
    return best
