"""Synthetic distributions with exact posteriors and conditional-loss oracles.

A Gaussian-mixture oracle knows P(Y=+1 | X=x) in closed form, so the
conditional loss L(theta; x) = E[l(theta; (x, Y)) | X = x], the pointwise
Bayes risk, and the gap between a model and the Bayes predictor are all
computable exactly. The k-NN LossCalibrator is the estimated counterpart
L-hat built from labeled samples only; calibration_error measures the mean
absolute gap between the two, which is the delta_t diagnostic of the
estimated-loss sampler.

Posteriors are computed in log-space: far from all centers the mixture
density underflows long before the posterior degenerates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .models_losses import (
    BINARY_MARGIN_LOSSES,
    KernelSpec,
    LossSpec,
    loss,
    loss_on_margin,
    loss_on_prob,
    sigmoid,
)
from .numerics import Interval, minimize_1d

BAYES_PREDICTION_BOUND = 20.0


@dataclass(frozen=True)
class MixtureComponent:
    center: np.ndarray
    std: float
    weight: float
    label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.std <= 0.0:
            raise ValueError(f"std must be > 0, got {self.std}")
        if self.weight < 0.0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label}")


@dataclass(frozen=True)
class GaussianMixtureOracle:
    """Isotropic Gaussian mixture with per-component binary labels."""

    components: tuple

    def __post_init__(self) -> None:
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        if not comps:
            raise ValueError("mixture needs at least one component")
        total = sum(c.weight for c in comps)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")

    @property
    def dim(self) -> int:
        return self.components[0].center.size

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": "gaussian_mixture",
                "components": [
                    {
                        "center": c.center.tolist(),
                        "std": c.std,
                        "weight": c.weight,
                        "label": c.label,
                    }
                    for c in self.components
                ],
            }
        )

    @staticmethod
    def from_json(text: str) -> "GaussianMixtureOracle":
        data = json.loads(text)
        if data.get("kind") != "gaussian_mixture":
            raise ValueError(f"not a gaussian_mixture payload: {data.get('kind')!r}")
        return GaussianMixtureOracle(
            tuple(
                MixtureComponent(np.asarray(c["center"]), c["std"], c["weight"], c["label"])
                for c in data["components"]
            )
        )


@dataclass(frozen=True)
class RegressionOracle:
    """Y = f_star(X) + Gaussian noise; squared error has a closed conditional loss."""

    f_star: Callable
    noise_std: float

    def __post_init__(self) -> None:
        if self.noise_std < 0.0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")


def _log_class_densities(dist: GaussianMixtureOracle, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """logsumexp of weighted component densities, split by label; xs is (n, d)."""
    pos_terms, neg_terms = [], []
    for c in dist.components:
        sq = ((xs - c.center[None, :]) ** 2).sum(axis=1)
        logphi = -sq / (2.0 * c.std**2) - xs.shape[1] * math.log(c.std * math.sqrt(2.0 * math.pi))
        term = math.log(c.weight) + logphi if c.weight > 0.0 else np.full(len(xs), -np.inf)
        (pos_terms if c.label > 0 else neg_terms).append(term)
    def lse(terms):
        if not terms:
            return np.full(len(xs), -np.inf)
        stack = np.stack(terms)
        m = np.max(stack, axis=0)
        safe = np.where(np.isfinite(m), m, 0.0)
        return safe + np.log(np.sum(np.exp(stack - safe[None, :]), axis=0))
    return lse(pos_terms), lse(neg_terms)


def posterior(dist: GaussianMixtureOracle, x) -> float | np.ndarray:
    """p(x) = P(Y = +1 | X = x); accepts one point or a matrix of rows."""
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    lp, ln = _log_class_densities(dist, xs)
    # sigmoid of the log-odds; stable for either sign
    diff = ln - lp
    p = np.where(np.isneginf(lp), 0.0, np.where(np.isneginf(ln), 1.0, 1.0 / (1.0 + np.exp(np.clip(diff, -709.0, 709.0)))))
    if np.asarray(x).ndim == 1:
        return float(p[0])
    return p


def mixture_density(dist: GaussianMixtureOracle, x) -> float | np.ndarray:
    xs = np.atleast_2d(np.asarray(x, dtype=float))
    lp, ln = _log_class_densities(dist, xs)
    out = np.exp(lp) + np.exp(ln)
    if np.asarray(x).ndim == 1:
        return float(out[0])
    return out


def draw_labels(dist: GaussianMixtureOracle, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fresh Y | X draws: +1 with probability p(x), else -1."""
    p = np.atleast_1d(posterior(dist, np.atleast_2d(xs)))
    return np.where(rng.uniform(size=len(p)) < p, 1.0, -1.0)


def conditional_loss(dist, spec: LossSpec, theta: np.ndarray, x, *, kernel: KernelSpec | None = None) -> float:
    """L(theta; x): the label-marginalized loss at a single point x."""
    x = np.asarray(x, dtype=float)
    if isinstance(dist, RegressionOracle):
        if spec.kind != "squared_error":
            raise ValueError("regression oracle only supports squared_error")
        theta = np.asarray(theta, dtype=float)
        if kernel is not None:
            from .models_losses import kernel_matrix

            pred = float(theta @ kernel_matrix(kernel, x[None, :])[:, 0])
        else:
            pred = float(theta @ x)
        return (pred - float(dist.f_star(x))) ** 2 + dist.noise_std**2
    if spec.label_kind != "binary":
        raise ValueError(f"mixture oracle needs a binary loss, got {spec.kind}")
    p = posterior(dist, x)
    return p * loss(spec, theta, (x, +1.0)) + (1.0 - p) * loss(spec, theta, (x, -1.0))


@dataclass(frozen=True)
class OracleContext:
    """Adapter giving the uncertainty module exact conditional losses."""

    dist: object
    spec: LossSpec
    kernel: KernelSpec | None = None

    def conditional_loss(self, theta, x) -> float:
        return conditional_loss(self.dist, self.spec, theta, x, kernel=self.kernel)


def _bayes_pointwise(spec: LossSpec, p: float) -> float:
    """min over predictions of the conditional loss at posterior p."""
    if spec.kind == "cross_entropy":
        # optimal q equals p; value is the binary entropy
        if p <= 0.0 or p >= 1.0:
            return 0.0
        return -(p * math.log(p) + (1.0 - p) * math.log1p(-p))
    B = BAYES_PREDICTION_BOUND
    from .models_losses import loss_on_margin

    def risk(yhat):
        yh = np.asarray(yhat, dtype=float)
        return p * loss_on_margin(spec.kind, yh) + (1.0 - p) * loss_on_margin(spec.kind, -yh)

    _, val = minimize_1d(risk, Interval(-B, B))
    return float(val)


def bayes_excess(dist, spec: LossSpec, theta: np.ndarray, eval_set: np.ndarray) -> tuple[float, float]:
    """(excess_L, excess_Ltilde) of theta against the pointwise Bayes predictor.

    excess_L = mean over eval_set of L(theta; x) - L*(x); excess_Ltilde uses
    Ltilde = L^2 / 2, whose pointwise minimizer is the same predictor since
    squaring is monotone on nonnegative losses.
    """
    eval_set = np.atleast_2d(np.asarray(eval_set, dtype=float))
    Lm = np.array([conditional_loss(dist, spec, theta, x) for x in eval_set])
    if isinstance(dist, RegressionOracle):
        Lstar = np.full(len(eval_set), dist.noise_std**2)
    else:
        ps = np.atleast_1d(posterior(dist, eval_set))
        Lstar = np.array([_bayes_pointwise(spec, float(p)) for p in ps])
    excess_L = float(np.mean(Lm) - np.mean(Lstar))
    excess_Lt = float(np.mean(0.5 * Lm**2) - np.mean(0.5 * Lstar**2))
    return excess_L, excess_Lt


def epsilon_star(dist, spec: LossSpec, eval_set: np.ndarray) -> float:
    """Pointwise minimum conditional Bayes risk over the evaluation grid."""
    eval_set = np.atleast_2d(np.asarray(eval_set, dtype=float))
    if isinstance(dist, RegressionOracle):
        return dist.noise_std**2
    ps = np.atleast_1d(posterior(dist, eval_set))
    return float(min(_bayes_pointwise(spec, float(p)) for p in ps))


class LossCalibrator:
    """k-NN estimate of the conditional loss from labeled samples.

    Stores raw (x, y) pairs and recomputes losses for whatever theta is
    being scored, so one pool serves the whole trajectory. Single writer:
    the sampler appends between steps; reads are safe between appends.
    """

    def __init__(self, spec: LossSpec, k: int | None = None):
        self.spec = spec
        self._k = k
        self._xs: list[np.ndarray] = []
        self._ys: list[float] = []
        self._stacked = 0  # rows of _cache_x that are current
        self._cache_x: np.ndarray | None = None
        self._cache_y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._xs)

    @property
    def k(self) -> int:
        if self._k is not None:
            return self._k
        n = len(self._xs)
        return math.isqrt(n - 1) + 1 if n else 1  # ceil(sqrt(n))

    def append(self, x: np.ndarray, y: float) -> None:
        self._xs.append(np.asarray(x, dtype=float))
        self._ys.append(float(y))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Pool as contiguous arrays; restacked only after new appends."""
        n = len(self._xs)
        if self._cache_x is None or self._stacked != n:
            self._cache_x = np.stack(self._xs)
            self._cache_y = np.asarray(self._ys, dtype=float)
            self._stacked = n
        return self._cache_x, self._cache_y

    def estimate(self, theta: np.ndarray, x: np.ndarray) -> float:
        return estimate_conditional_loss(self, self.spec, theta, x)


def estimate_conditional_loss(cal: LossCalibrator, spec: LossSpec, theta: np.ndarray, x: np.ndarray) -> float:
    """Mean realized loss over the k nearest labeled neighbors; 1 if empty."""
    n = len(cal)
    if n == 0:
        return 1.0
    xs, ys = cal.arrays()
    d2 = ((xs - np.asarray(x, dtype=float)[None, :]) ** 2).sum(axis=1)
    k = min(cal.k, n)
    idx = np.argpartition(d2, k - 1)[:k]
    theta = np.asarray(theta, dtype=float)
    if spec.kind == "cross_entropy":
        q = sigmoid(xs[idx] @ theta)
        return float(np.mean(loss_on_prob(q, ys[idx])))
    if spec.kind in BINARY_MARGIN_LOSSES:
        return float(np.mean(loss_on_margin(spec.kind, ys[idx] * (xs[idx] @ theta))))
    vals = [loss(spec, theta, (xs[i], ys[i])) for i in idx]
    return float(np.mean(vals))


@dataclass(frozen=True)
class CalibratorContext:
    """Adapter for the estimated-loss uncertainty; clips to the [0, 1] range
    assumed by the stream sampler's query probability."""

    cal: LossCalibrator

    def estimate(self, theta, x) -> float:
        return float(np.clip(self.cal.estimate(theta, x), 0.0, 1.0))


def calibration_error(
    cal: LossCalibrator, dist, spec: LossSpec, theta: np.ndarray, eval_set: np.ndarray, *, clip: bool = False
) -> float:
    """Empirical mean of |L-hat - L| over the evaluation set (the delta_t log).

    With clip=True both losses are clipped to [0, 1] before differencing,
    matching the range the sampler actually uses as a query probability.
    """
    eval_set = np.atleast_2d(np.asarray(eval_set, dtype=float))
    gaps = []
    for x in eval_set:
        est = estimate_conditional_loss(cal, spec, theta, x)
        true = conditional_loss(dist, spec, theta, x)
        if clip:
            est = min(max(est, 0.0), 1.0)
            true = min(max(true, 0.0), 1.0)
        gaps.append(abs(est - true))
    return float(np.mean(gaps))
