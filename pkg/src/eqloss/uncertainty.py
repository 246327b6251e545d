"""Uncertainty functions U(theta; X) driving the query coin.

Prediction-based kinds
----------------------
* ``entropy``            −[q log q + (1−q) log(1−q)], q = sigma(theta^T x)
* ``least_confidence``   min(q, 1−q)
* ``margin_based``       1 / (1 + mu |theta^T x|)
* ``threshold``          1{|theta^T x| <= gamma}   (equality queries)
* ``exponential``        exp(−mu |theta^T x|)

Loss-based kinds (need a context object)
----------------------------------------
* ``oracle_loss``        L(theta; x) = E[l(theta; (x, Y)) | X = x]
* ``estimated_loss``     k-nearest-neighbour estimate of L
* ``exp_oracle_loss``    exp(L(theta; x))

The context must expose ``conditional_loss(theta, x)`` for the oracle kinds
and ``estimate(theta, x)`` for the estimated kind; both are provided by the
oracles module.

Values above 1 cannot be used as query probabilities directly. clamp_mode
decides what the stream sampler does there: ``always_query_if_ge_one``
(default) queries surely and multiplies the step by U, which keeps the
expected update proportional to U * grad; ``clamp_to_one`` just caps the
probability and is kept for ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .models_losses import clamp_prob, sigmoid

UNCERTAINTY_KINDS = (
    "entropy",
    "least_confidence",
    "margin_based",
    "threshold",
    "exponential",
    "oracle_loss",
    "estimated_loss",
    "exp_oracle_loss",
)
LOSS_BASED_KINDS = ("oracle_loss", "estimated_loss", "exp_oracle_loss")
PROBABILISTIC_KINDS = ("entropy", "least_confidence")

ClampMode = Literal["clamp_to_one", "always_query_if_ge_one"]


@dataclass(frozen=True)
class UncertaintySpec:
    kind: str
    mu: float = 1.0
    gamma: float = 1.0
    k: int = 5
    clamp_mode: ClampMode = "always_query_if_ge_one"

    def __post_init__(self) -> None:
        if self.kind not in UNCERTAINTY_KINDS:
            raise ValueError(f"unknown uncertainty kind {self.kind!r}")
        if self.mu <= 0.0:
            raise ValueError(f"mu must be > 0, got {self.mu}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.clamp_mode not in ("clamp_to_one", "always_query_if_ge_one"):
            raise ValueError(f"unknown clamp_mode {self.clamp_mode!r}")

    @property
    def loss_based(self) -> bool:
        return self.kind in LOSS_BASED_KINDS


def entropy_of(q):
    """Binary entropy in nats, clamped away from q in {0, 1}."""
    q = clamp_prob(np.asarray(q, dtype=float))
    out = -(q * np.log(q) + (1.0 - q) * np.log1p(-q))
    if out.ndim == 0:
        return float(out)
    return out


def uncertainty_scalar(spec: UncertaintySpec, arg):
    """U as a function of its scalar argument.

    For probabilistic kinds ``arg`` is the predicted probability q; for the
    margin kinds it is the raw score yhat = theta^T x (only |yhat| matters).
    Loss-based kinds have no scalar form and raise.
    """
    if spec.kind == "entropy":
        return entropy_of(arg)
    if spec.kind == "least_confidence":
        q = clamp_prob(np.asarray(arg, dtype=float))
        out = np.minimum(q, 1.0 - q)
    elif spec.kind == "margin_based":
        out = 1.0 / (1.0 + spec.mu * np.abs(np.asarray(arg, dtype=float)))
    elif spec.kind == "threshold":
        out = (np.abs(np.asarray(arg, dtype=float)) <= spec.gamma).astype(float)
    elif spec.kind == "exponential":
        out = np.exp(-spec.mu * np.abs(np.asarray(arg, dtype=float)))
    else:
        raise ValueError(f"{spec.kind!r} has no scalar form")
    if out.ndim == 0:
        return float(out)
    return out


def uncertainty(spec: UncertaintySpec, theta: np.ndarray, x: np.ndarray, context=None) -> float:
    """U(theta; x) >= 0 for any kind; loss-based kinds consult the context."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    if spec.kind in PROBABILISTIC_KINDS:
        return float(uncertainty_scalar(spec, sigmoid(float(theta @ x))))
    if spec.kind in ("margin_based", "threshold", "exponential"):
        return float(uncertainty_scalar(spec, float(theta @ x)))
    if context is None:
        raise ValueError(f"uncertainty kind {spec.kind!r} requires a context")
    if spec.kind == "oracle_loss":
        return float(context.conditional_loss(theta, x))
    if spec.kind == "exp_oracle_loss":
        return math.exp(float(context.conditional_loss(theta, x)))
    if spec.kind == "estimated_loss":
        return float(context.estimate(theta, x))
    raise ValueError(f"unknown uncertainty kind {spec.kind!r}")


def query_probability(u: float) -> float:
    """Probability that the label is queried given uncertainty u."""
    return min(float(u), 1.0)


def step_scale(spec: UncertaintySpec, u: float) -> float:
    """Multiplier on the descent step for a queried sample.

    Under always_query_if_ge_one the query probability saturates at 1 for
    u > 1 and the lost factor is moved into the step size, so the expected
    update stays u * grad; under clamp_to_one the factor is dropped.
    """
    if spec.clamp_mode == "always_query_if_ge_one" and u > 1.0:
        return float(u)
    return 1.0
