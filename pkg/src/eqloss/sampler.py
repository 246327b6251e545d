"""Uncertainty-sampling drivers: streaming and pool algorithms.

Four algorithms share one bookkeeping scheme. A run pregenerates every
random draw with numpy Philox streams split by purpose (features, labels,
query coins, index selection), then advances the iterate step by step,
recording strided snapshots of theta and the running average
theta_bar_{t+1} = (1 - 1/(t+1)) * theta_bar_t + (1/(t+1)) * theta_{t+1}.

The streaming inner loop runs either in the compiled extension or the
pure-Python twin; both consume the same pregenerated arrays in the same
scalar order, so a run is bit-identical across backends and across reruns
with the same seed. Pool-based algorithms are numpy-driven, with the same
determinism guarantee for a fixed seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models_losses import (
    BINARY_MARGIN_LOSSES,
    LossSpec,
    ParamVector,
    clamp_prob,
    loss_on_margin,
    project_to_ball,
    sigmoid,
)
from .oracles import (
    GaussianMixtureOracle,
    LossCalibrator,
    calibration_error,
    posterior,
)
from .uncertainty import UncertaintySpec, step_scale

from . import _stream_py as _python_kernel

try:
    from . import _stream_kernel as _compiled_kernel
except ImportError:
    _compiled_kernel = None

HAVE_COMPILED = _compiled_kernel is not None

ALGORITHM_KINDS = ("stream", "pool", "topk", "mixture")
POOL_STEP_SCALINGS = ("with_St_over_n", "none")

GENERATOR_ID = (
    "numpy.random.Generator(Philox), streams split by purpose via "
    "SeedSequence(seed).spawn(4): [features, labels, coins, selection]"
)

# Stream draws are generated in fixed-size chunks so the realized sample
# path depends only on the seed, never on the snapshot stride.
GEN_CHUNK = 65536

_LOSS_IDS = {
    "cross_entropy": 0,
    "squared_margin": 1,
    "logistic": 2,
    "margin": 3,
    "exponential": 4,
}

_UNC_IDS = {
    "entropy": 0,
    "least_confidence": 1,
    "margin_based": 2,
    "threshold": 3,
    "exponential": 4,
    "oracle_loss": 5,
    "exp_oracle_loss": 6,
}


@dataclass(frozen=True)
class AlgorithmSpec:
    """Configuration shared by the four run drivers.

    eta is the constant step size; callers wanting the horizon rule
    eta = D / (G * sqrt(T + 1)) compute it first and note it in eta_rule.
    stride controls snapshot spacing and defaults to max(1, T // 1000).
    """

    kind: str
    T: int
    eta: float
    seed: int = 0
    m: int = 1
    gamma_mix: float = 0.5
    pool_step_scaling: str = "with_St_over_n"
    stride: Optional[int] = None
    eta_rule: str = "constant"
    backend: str = "auto"

    def __post_init__(self) -> None:
        if self.kind not in ALGORITHM_KINDS:
            raise ValueError(f"unknown algorithm kind {self.kind!r}")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not (self.eta > 0.0 and math.isfinite(self.eta)):
            raise ValueError("eta must be positive and finite")
        if self.m < 1:
            raise ValueError("m must be at least 1")
        if not 0.0 < self.gamma_mix < 1.0:
            raise ValueError("gamma_mix must lie in (0, 1)")
        if self.pool_step_scaling not in POOL_STEP_SCALINGS:
            raise ValueError(
                f"pool_step_scaling must be one of {POOL_STEP_SCALINGS}"
            )
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be positive when given")
        if self.backend not in ("auto", "compiled", "python"):
            raise ValueError("backend must be auto, compiled, or python")

    @property
    def snapshot_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        return max(1, self.T // 1000)


def snapshot_steps(T: int, stride: int) -> np.ndarray:
    """Step indices (1-based) at which state is recorded; always includes T."""
    steps = list(range(stride, T + 1, stride))
    if not steps or steps[-1] != T:
        steps.append(T)
    return np.asarray(steps, dtype=np.int64)


@dataclass
class RunRecord:
    """Everything a run produced, minus anything wall-clock dependent.

    wall_time_s is kept in memory for benchmarking but excluded from the
    persisted JSON and CSV so reruns with the same seed are byte-identical.
    """

    algorithm: str
    config: dict
    seed: int
    generator: str
    snapshot_step: np.ndarray
    theta_snap: np.ndarray
    theta_bar_snap: np.ndarray
    u_snap: np.ndarray
    queries_cum: np.ndarray
    theta_final: np.ndarray
    theta_bar_final: np.ndarray
    total_queries: int
    queried_snap: Optional[np.ndarray] = None
    chosen_snap: Optional[np.ndarray] = None
    s_snap: Optional[np.ndarray] = None
    delta_snap: Optional[np.ndarray] = None
    uniform_fallbacks: int = 0
    train_metric: Optional[np.ndarray] = None
    test_metric: Optional[np.ndarray] = None
    metric_name: Optional[str] = None
    wall_time_s: Optional[float] = None

    def to_json_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "algorithm": self.algorithm,
            "config": self.config,
            "seed": self.seed,
            "generator": self.generator,
            "snapshot_step": arr(self.snapshot_step),
            "theta_snap": arr(self.theta_snap),
            "theta_bar_snap": arr(self.theta_bar_snap),
            "u_snap": arr(self.u_snap),
            "queries_cum": arr(self.queries_cum),
            "queried_snap": arr(self.queried_snap),
            "chosen_snap": arr(self.chosen_snap),
            "s_snap": arr(self.s_snap),
            "delta_snap": arr(self.delta_snap),
            "uniform_fallbacks": self.uniform_fallbacks,
            "theta_final": arr(self.theta_final),
            "theta_bar_final": arr(self.theta_bar_final),
            "total_queries": self.total_queries,
            "train_metric": arr(self.train_metric),
            "test_metric": arr(self.test_metric),
            "metric_name": self.metric_name,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "queries_so_far", "train_metric", "test_metric"])
        for k, step in enumerate(self.snapshot_step):
            train = "" if self.train_metric is None else repr(float(self.train_metric[k]))
            test = "" if self.test_metric is None else repr(float(self.test_metric[k]))
            writer.writerow([int(step), int(self.queries_cum[k]), train, test])
        return buf.getvalue()

    def save_metrics_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.metrics_csv())


def theta_init(dim: int, m_theta: float, rng: np.random.Generator) -> np.ndarray:
    """Random direction at radius 0.1 * M_Theta, strictly inside the ball."""
    g = rng.standard_normal(dim)
    nrm = float(np.linalg.norm(g))
    if nrm == 0.0:
        g = np.ones(dim)
        nrm = float(np.linalg.norm(g))
    return (0.1 * m_theta / nrm) * g


def _spawned_rngs(seed: int) -> tuple:
    children = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.Generator(np.random.Philox(c)) for c in children)


def _config_dict(alg: AlgorithmSpec, loss: LossSpec, unc: UncertaintySpec, extra: dict) -> dict:
    cfg = {
        "algorithm": {
            "kind": alg.kind,
            "T": alg.T,
            "eta": alg.eta,
            "seed": alg.seed,
            "m": alg.m,
            "gamma_mix": alg.gamma_mix,
            "pool_step_scaling": alg.pool_step_scaling,
            "stride": alg.snapshot_stride,
            "eta_rule": alg.eta_rule,
        },
        "loss": {"kind": loss.kind, "n_classes": loss.n_classes},
        "uncertainty": {
            "kind": unc.kind,
            "mu": unc.mu,
            "gamma": unc.gamma,
            "k": unc.k,
            "clamp_mode": unc.clamp_mode,
        },
    }
    cfg.update(extra)
    return cfg


# ---------------------------------------------------------------------------
# vectorized scalar-model helpers (binary linear / probabilistic models)


def margin_scores(theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    return X @ theta


def grad_coef(loss: LossSpec, yhat: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d loss / d yhat for each row; gradient is coef[:, None] * X."""
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if loss.kind == "cross_entropy":
        q = clamp_prob(sigmoid(yhat))
        return q - (y > 0.0)
    s = y * yhat
    if loss.kind == "squared_margin":
        return np.where(s < 1.0, -2.0 * (1.0 - s), 0.0) * y
    if loss.kind == "logistic":
        return -sigmoid(-s) * y
    if loss.kind == "margin":
        return np.where(s < 1.0, -1.0, 0.0) * y
    if loss.kind == "exponential":
        return -np.exp(np.minimum(-s, 700.0)) * y
    raise ValueError(f"loss kind {loss.kind!r} has no scalar margin form")


def conditional_grad_coef(loss: LossSpec, yhat: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Posterior-averaged d loss / d yhat: p * coef(+1) + (1-p) * coef(-1)."""
    ones = np.ones_like(np.asarray(yhat, dtype=float))
    return p * grad_coef(loss, yhat, ones) + (1.0 - p) * grad_coef(loss, yhat, -ones)


def conditional_loss_vec(loss: LossSpec, yhat: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Posterior-averaged loss value at each score."""
    yhat = np.asarray(yhat, dtype=float)
    if loss.kind == "cross_entropy":
        q = clamp_prob(sigmoid(yhat))
        return -(p * np.log(q) + (1.0 - p) * np.log(1.0 - q))
    return p * loss_on_margin(loss.kind, yhat) + (1.0 - p) * loss_on_margin(loss.kind, -yhat)


def uncertainty_vec(
    unc: UncertaintySpec,
    loss: LossSpec,
    yhat: np.ndarray,
    p: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorized uncertainty over scores; oracle kinds need the posterior."""
    yhat = np.asarray(yhat, dtype=float)
    if unc.kind == "entropy":
        q = clamp_prob(sigmoid(yhat))
        return -(q * np.log(q) + (1.0 - q) * np.log(1.0 - q))
    if unc.kind == "least_confidence":
        q = sigmoid(yhat)
        return np.minimum(q, 1.0 - q)
    if unc.kind == "margin_based":
        return 1.0 / (1.0 + unc.mu * np.abs(yhat))
    if unc.kind == "threshold":
        return (np.abs(yhat) <= unc.gamma).astype(float)
    if unc.kind == "exponential":
        return np.exp(-unc.mu * np.abs(yhat))
    if unc.kind in ("oracle_loss", "exp_oracle_loss"):
        if p is None:
            raise ValueError(f"{unc.kind} requires the posterior")
        L = conditional_loss_vec(loss, yhat, p)
        if unc.kind == "oracle_loss":
            return L
        return np.exp(np.minimum(L, 700.0))
    raise ValueError(f"uncertainty kind {unc.kind!r} has no vectorized form")


def effective_update_factor(unc: UncertaintySpec, u: np.ndarray) -> np.ndarray:
    """Expected step multiplier per arrival: query probability times scale.

    Under always_query_if_ge_one this is exactly u (min(u,1) probability,
    scale u past 1); under clamp_to_one it is min(u, 1).
    """
    u = np.asarray(u, dtype=float)
    if unc.clamp_mode == "clamp_to_one":
        return np.minimum(u, 1.0)
    return u


# ---------------------------------------------------------------------------
# streaming driver


def _kernel_for(backend: str):
    choice = backend
    if choice == "auto":
        choice = "compiled" if HAVE_COMPILED else "python"
    if choice == "compiled":
        if _compiled_kernel is None:
            raise RuntimeError("compiled stream kernel is unavailable")
        return _compiled_kernel, "compiled"
    return _python_kernel, "python"


def _run_segment(kernel, theta, bar, X, ys, coins, posts, lid, uid, unc, eta, m_theta, t_start):
    clamp_ab = 0 if unc.clamp_mode == "always_query_if_ge_one" else 1
    if kernel is _python_kernel:
        th = theta.tolist()
        br = bar.tolist()
        out = kernel.run_segment(
            th, br, X.tolist(), ys.tolist(), coins.tolist(), posts.tolist(),
            lid, uid, unc.mu, unc.gamma, clamp_ab, eta, m_theta, t_start,
        )
        theta[:] = th
        bar[:] = br
        return out
    return kernel.run_segment(
        theta, bar, X, ys, coins, posts,
        lid, uid, unc.mu, unc.gamma, clamp_ab, eta, m_theta, t_start,
    )


def run_stream(
    alg: AlgorithmSpec,
    loss: LossSpec,
    unc: UncertaintySpec,
    dist: GaussianMixtureOracle,
    theta1: ParamVector,
    *,
    calibrator: Optional[LossCalibrator] = None,
    delta_eval: Optional[np.ndarray] = None,
) -> RunRecord:
    """Streaming uncertainty sampling over fresh draws from the mixture.

    Arrival t: x_t from the mixture, label revealed only on query with
    P(y=+1|x) = posterior. Query iff coin <= U; queried steps move theta by
    eta * scale * grad and project onto the M_Theta ball. estimated_loss
    runs in the Python driver because its k-NN pool grows with the run; the
    other kinds run in segments through the selected kernel backend.
    """
    if alg.kind != "stream":
        raise ValueError("run_stream requires an AlgorithmSpec of kind 'stream'")
    if loss.kind not in _LOSS_IDS:
        raise ValueError(f"stream runs support scalar losses, not {loss.kind!r}")
    if unc.kind == "estimated_loss":
        return _run_stream_estimated(alg, loss, unc, dist, theta1, calibrator, delta_eval)
    if unc.kind not in _UNC_IDS:
        raise ValueError(f"unsupported stream uncertainty {unc.kind!r}")

    from .data_io import draw_features

    kernel, backend_name = _kernel_for(alg.backend)
    lid = _LOSS_IDS[loss.kind]
    uid = _UNC_IDS[unc.kind]
    needs_posterior = unc.kind in ("oracle_loss", "exp_oracle_loss")

    rng_x, rng_y, rng_c, _ = _spawned_rngs(alg.seed)
    theta = np.array(theta1.theta, dtype=float)
    bar = theta.copy()
    m_theta = theta1.m_theta

    steps = snapshot_steps(alg.T, alg.snapshot_stride)
    n_snap = len(steps)
    dim = theta.size
    theta_snap = np.empty((n_snap, dim))
    bar_snap = np.empty((n_snap, dim))
    u_snap = np.empty(n_snap)
    queried_snap = np.empty(n_snap, dtype=bool)
    queries_cum = np.empty(n_snap, dtype=np.int64)

    total = 0
    snap_i = 0
    started = time.perf_counter()
    for chunk_start in range(1, alg.T + 1, GEN_CHUNK):
        chunk_stop = min(chunk_start + GEN_CHUNK - 1, alg.T)
        length = chunk_stop - chunk_start + 1
        X = draw_features(dist, length, rng_x)
        p = posterior(dist, X)
        p = np.atleast_1d(np.asarray(p, dtype=float))
        ys = np.where(rng_y.random(length) < p, 1.0, -1.0)
        coins = rng_c.random(length)
        posts = p if needs_posterior else np.zeros(length)
        t_start = chunk_start
        while t_start <= chunk_stop:
            stop = int(steps[snap_i]) if snap_i < n_snap else chunk_stop
            stop = min(stop, chunk_stop)
            lo = t_start - chunk_start
            hi = stop - chunk_start + 1
            err, nq, u_last, q_last = _run_segment(
                kernel, theta, bar, X[lo:hi], ys[lo:hi], coins[lo:hi],
                posts[lo:hi], lid, uid, unc, alg.eta, m_theta, t_start,
            )
            if err >= 0:
                raise FloatingPointError(f"non-finite update at step {err}")
            total += nq
            if snap_i < n_snap and stop == int(steps[snap_i]):
                theta_snap[snap_i] = theta
                bar_snap[snap_i] = bar
                u_snap[snap_i] = u_last
                queried_snap[snap_i] = bool(q_last)
                queries_cum[snap_i] = total
                snap_i += 1
            t_start = stop + 1
    wall = time.perf_counter() - started

    cfg = _config_dict(alg, loss, unc, {"backend": backend_name, "source": json.loads(dist.to_json())})
    return RunRecord(
        algorithm="stream",
        config=cfg,
        seed=alg.seed,
        generator=GENERATOR_ID,
        snapshot_step=steps,
        theta_snap=theta_snap,
        theta_bar_snap=bar_snap,
        u_snap=u_snap,
        queried_snap=queried_snap,
        queries_cum=queries_cum,
        theta_final=theta.copy(),
        theta_bar_final=bar.copy(),
        total_queries=total,
        wall_time_s=wall,
    )


def _run_stream_estimated(
    alg: AlgorithmSpec,
    loss: LossSpec,
    unc: UncertaintySpec,
    dist: GaussianMixtureOracle,
    theta1: ParamVector,
    calibrator: Optional[LossCalibrator],
    delta_eval: Optional[np.ndarray],
) -> RunRecord:
    """Python-only stream loop for the plug-in loss estimate.

    The calibrator's labeled pool grows on every query, so uncertainty at
    step t depends on all earlier queries; no pregenerated shortcut exists
    for the estimate itself, only for the raw draws.
    """
    from .data_io import draw_features
    from .oracles import estimate_conditional_loss

    if calibrator is None:
        calibrator = LossCalibrator(loss)
    n_seeded = len(calibrator)

    rng_x, rng_y, rng_c, _ = _spawned_rngs(alg.seed)
    theta_vec = np.array(theta1.theta, dtype=float)
    bar = theta_vec.copy()
    m_theta = theta1.m_theta

    steps = snapshot_steps(alg.T, alg.snapshot_stride)
    X_all = draw_features(dist, alg.T, rng_x)
    p_all = np.atleast_1d(np.asarray(posterior(dist, X_all), dtype=float))
    ys_all = np.where(rng_y.random(alg.T) < p_all, 1.0, -1.0)
    coins = rng_c.random(alg.T)

    n_snap = len(steps)
    dim = theta_vec.size
    theta_snap = np.empty((n_snap, dim))
    bar_snap = np.empty((n_snap, dim))
    u_snap = np.empty(n_snap)
    queried_snap = np.empty(n_snap, dtype=bool)
    queries_cum = np.empty(n_snap, dtype=np.int64)
    delta_snap = np.empty(n_snap) if delta_eval is not None else None

    from .models_losses import LabeledSample, loss_grad

    total = 0
    snap_i = 0
    started = time.perf_counter()
    for t in range(1, alg.T + 1):
        x = X_all[t - 1]
        raw = estimate_conditional_loss(calibrator, loss, theta_vec, x)
        u = float(np.clip(raw, 0.0, 1.0))
        queried = coins[t - 1] <= u
        if queried:
            total += 1
            y = float(ys_all[t - 1])
            g = loss_grad(loss, theta_vec, LabeledSample(x, y))
            scale = step_scale(unc, u)
            theta_vec = project_to_ball(theta_vec - alg.eta * scale * g, m_theta)
            calibrator.append(x, y)
        c = 1.0 / (t + 1.0)
        bar = (1.0 - c) * bar + c * theta_vec
        if snap_i < n_snap and t == steps[snap_i]:
            theta_snap[snap_i] = theta_vec
            bar_snap[snap_i] = bar
            u_snap[snap_i] = u
            queried_snap[snap_i] = bool(queried)
            queries_cum[snap_i] = total
            if delta_snap is not None:
                delta_snap[snap_i] = calibration_error(
                    calibrator, dist, loss, theta_vec, delta_eval, clip=True
                )
            snap_i += 1
    wall = time.perf_counter() - started

    cfg = _config_dict(
        alg, loss, unc,
        {"backend": "python", "source": json.loads(dist.to_json()),
         "calibrator_seeded": n_seeded},
    )
    return RunRecord(
        algorithm="stream",
        config=cfg,
        seed=alg.seed,
        generator=GENERATOR_ID,
        snapshot_step=steps,
        theta_snap=theta_snap,
        theta_bar_snap=bar_snap,
        u_snap=u_snap,
        queried_snap=queried_snap,
        queries_cum=queries_cum,
        delta_snap=delta_snap,
        theta_final=theta_vec.copy(),
        theta_bar_final=bar.copy(),
        total_queries=total,
        wall_time_s=wall,
    )


# ---------------------------------------------------------------------------
# pool drivers (proportional, top-k, mixture)


def top_m_indices(u: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest uncertainties; ties resolved to lowest index."""
    n = len(u)
    order = np.lexsort((np.arange(n), -np.asarray(u, dtype=float)))
    return order[:m]


def mixture_weights(n: int, m: int, gamma: float, top: np.ndarray) -> np.ndarray:
    """Per-index selection law (1-gamma)/n + gamma/m on the top-m set."""
    p = np.full(n, (1.0 - gamma) / n)
    p[top] += gamma / m
    return p


def phi_divergence(p: np.ndarray) -> float:
    """D_phi(p || uniform) with phi(z) = (z - 1)^2 / 2."""
    p = np.asarray(p, dtype=float)
    n = len(p)
    z = p * n
    return float(np.mean(0.5 * (z - 1.0) ** 2))


def _pool_uncertainty(
    unc: UncertaintySpec,
    loss: LossSpec,
    theta: np.ndarray,
    X: np.ndarray,
    p: np.ndarray,
    calibrator: Optional[LossCalibrator],
) -> np.ndarray:
    if unc.kind == "estimated_loss":
        if calibrator is None:
            raise ValueError("estimated_loss pool runs need a calibrator")
        vals = np.empty(len(X))
        from .oracles import estimate_conditional_loss

        for i, x in enumerate(X):
            vals[i] = estimate_conditional_loss(calibrator, loss, theta, x)
        return np.clip(vals, 0.0, 1.0)
    yh = margin_scores(theta, X)
    return uncertainty_vec(unc, loss, yh, p)


def _run_pool_family(
    alg: AlgorithmSpec,
    loss: LossSpec,
    unc: UncertaintySpec,
    X: np.ndarray,
    pool_posterior: np.ndarray,
    theta1: ParamVector,
    calibrator: Optional[LossCalibrator],
    labels_fresh: bool,
) -> RunRecord:
    X = np.asarray(X, dtype=float)
    p = np.asarray(pool_posterior, dtype=float)
    n, dim = X.shape
    if alg.kind in ("topk", "mixture") and alg.m > n:
        raise ValueError("m cannot exceed the pool size")

    _, rng_y, rng_c, rng_s = _spawned_rngs(alg.seed)
    sel_u = rng_s.random(alg.T)
    lab_u = rng_y.random(alg.T)
    coin_u = rng_c.random(alg.T) if alg.kind == "mixture" else None

    theta = np.array(theta1.theta, dtype=float)
    bar = theta.copy()
    m_theta = theta1.m_theta

    steps = snapshot_steps(alg.T, alg.snapshot_stride)
    n_snap = len(steps)
    theta_snap = np.empty((n_snap, dim))
    bar_snap = np.empty((n_snap, dim))
    u_snap = np.empty(n_snap)
    chosen_snap = np.empty(n_snap, dtype=np.int64)
    s_snap = np.empty(n_snap)
    queries_cum = np.empty(n_snap, dtype=np.int64)

    fallbacks = 0
    snap_i = 0
    started = time.perf_counter()
    for t in range(1, alg.T + 1):
        u_vals = _pool_uncertainty(unc, loss, theta, X, p, calibrator)
        S = float(np.sum(u_vals))
        if alg.kind == "pool":
            if S > 0.0:
                cum = np.cumsum(u_vals)
                idx = int(np.searchsorted(cum, sel_u[t - 1] * S, side="right"))
                idx = min(idx, n - 1)
            else:
                fallbacks += 1
                idx = min(int(sel_u[t - 1] * n), n - 1)
            scale = (S / n) if alg.pool_step_scaling == "with_St_over_n" else 1.0
        elif alg.kind == "topk":
            top = top_m_indices(u_vals, alg.m)
            idx = int(top[min(int(sel_u[t - 1] * alg.m), alg.m - 1)])
            scale = 1.0
        else:
            top = top_m_indices(u_vals, alg.m)
            if coin_u[t - 1] < 1.0 - alg.gamma_mix:
                idx = min(int(sel_u[t - 1] * n), n - 1)
            else:
                idx = int(top[min(int(sel_u[t - 1] * alg.m), alg.m - 1)])
            scale = 1.0

        if labels_fresh:
            y = 1.0 if lab_u[t - 1] < p[idx] else -1.0
        else:
            y = 1.0 if p[idx] >= 0.5 else -1.0
        yh = float(X[idx] @ theta)
        coef = grad_coef(loss, np.array([yh]), np.array([y]))[0]
        theta = theta - alg.eta * scale * coef * X[idx]
        theta = project_to_ball(theta, m_theta)
        if calibrator is not None and unc.kind == "estimated_loss":
            calibrator.append(X[idx], y)
        c = 1.0 / (t + 1.0)
        bar = (1.0 - c) * bar + c * theta
        if snap_i < n_snap and t == steps[snap_i]:
            theta_snap[snap_i] = theta
            bar_snap[snap_i] = bar
            u_snap[snap_i] = float(u_vals[idx])
            chosen_snap[snap_i] = idx
            s_snap[snap_i] = S
            queries_cum[snap_i] = t
            snap_i += 1
    wall = time.perf_counter() - started

    cfg = _config_dict(
        alg, loss, unc,
        {"pool_size": n, "labels_fresh": labels_fresh, "backend": "python"},
    )
    return RunRecord(
        algorithm=alg.kind,
        config=cfg,
        seed=alg.seed,
        generator=GENERATOR_ID,
        snapshot_step=steps,
        theta_snap=theta_snap,
        theta_bar_snap=bar_snap,
        u_snap=u_snap,
        chosen_snap=chosen_snap,
        s_snap=s_snap,
        queries_cum=queries_cum,
        uniform_fallbacks=fallbacks,
        theta_final=theta.copy(),
        theta_bar_final=bar.copy(),
        total_queries=alg.T,
        wall_time_s=wall,
    )


def run_pool(
    alg: AlgorithmSpec,
    loss: LossSpec,
    unc: UncertaintySpec,
    X: np.ndarray,
    pool_posterior: np.ndarray,
    theta1: ParamVector,
    *,
    calibrator: Optional[LossCalibrator] = None,
    labels_fresh: bool = True,
) -> RunRecord:
    """Proportional pool sampling: draw index i with probability U_i / S_t.

    Every step queries its chosen point; fresh label draws use the pool
    posterior (pass labels_fresh=False for fixed recorded labels, where
    the posterior degenerates to 0/1). All-zero uncertainty falls back to
    uniform selection and increments uniform_fallbacks.
    """
    if alg.kind != "pool":
        raise ValueError("run_pool requires kind 'pool'")
    return _run_pool_family(alg, loss, unc, X, pool_posterior, theta1, calibrator, labels_fresh)


def run_topk(
    alg: AlgorithmSpec,
    loss: LossSpec,
    unc: UncertaintySpec,
    X: np.ndarray,
    pool_posterior: np.ndarray,
    theta1: ParamVector,
    *,
    calibrator: Optional[LossCalibrator] = None,
    labels_fresh: bool = True,
) -> RunRecord:
    """Uniform sampling over the m most uncertain pool points, unscaled steps."""
    if alg.kind != "topk":
        raise ValueError("run_topk requires kind 'topk'")
    return _run_pool_family(alg, loss, unc, X, pool_posterior, theta1, calibrator, labels_fresh)


def run_mixture(
    alg: AlgorithmSpec,
    loss: LossSpec,
    unc: UncertaintySpec,
    X: np.ndarray,
    pool_posterior: np.ndarray,
    theta1: ParamVector,
    *,
    calibrator: Optional[LossCalibrator] = None,
    labels_fresh: bool = True,
) -> RunRecord:
    """Coin flip per step: uniform with prob 1-gamma, top-m uniform with prob gamma."""
    if alg.kind != "mixture":
        raise ValueError("run_mixture requires kind 'mixture'")
    return _run_pool_family(alg, loss, unc, X, pool_posterior, theta1, calibrator, labels_fresh)


# ---------------------------------------------------------------------------
# one-step expectation checks


@dataclass(frozen=True)
class FrozenState:
    """A single algorithm state frozen for Monte-Carlo verification.

    Stream states draw fresh (x, y, coin) triples from dist; pool states
    draw (index, y) pairs from the frozen selection law over the stored
    pool. theta never moves.
    """

    kind: str
    loss: LossSpec
    unc: UncertaintySpec
    theta: np.ndarray
    eta: float
    m_theta: float
    dist: Optional[GaussianMixtureOracle] = None
    pool: Optional[np.ndarray] = None
    pool_posterior: Optional[np.ndarray] = None
    m: int = 1
    gamma_mix: float = 0.5
    pool_step_scaling: str = "with_St_over_n"
    seed: int = 0


@dataclass(frozen=True)
class UpdateCheck:
    """Monte-Carlo mean update against its analytic target, per coordinate."""

    empirical: np.ndarray
    target: np.ndarray
    z_scores: np.ndarray
    n_draws: int
    extras: dict = field(default_factory=dict)

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores)))


def _stream_pointwise_target(state: FrozenState, X: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Per-draw conditional mean of update / (-eta): factor(U) * E_y[grad]."""
    yh = margin_scores(state.theta, X)
    u = uncertainty_vec(state.unc, state.loss, yh, p)
    factor = effective_update_factor(state.unc, u)
    coef = conditional_grad_coef(state.loss, yh, p)
    return (factor * coef)[:, None] * X


def expected_update_check(state: FrozenState, n_draws: int) -> UpdateCheck:
    """Compare the mean one-step update at a frozen state to its target.

    Stream states pair each draw with its conditional target, so the
    residual is mean-zero draw by draw and the z-score isolates true bias.
    Pool states have deterministic targets; the z-score uses the raw
    spread of the simulated updates.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(state.seed)))
    if state.kind == "stream":
        from .data_io import draw_features

        X = draw_features(state.dist, n_draws, rng)
        p = np.atleast_1d(np.asarray(posterior(state.dist, X), dtype=float))
        yh = margin_scores(state.theta, X)
        u = uncertainty_vec(state.unc, state.loss, yh, p)
        ys = np.where(rng.random(n_draws) < p, 1.0, -1.0)
        coins = rng.random(n_draws)
        queried = coins <= u
        scale = np.where(
            (state.unc.clamp_mode == "always_query_if_ge_one") & (u > 1.0), u, 1.0
        )
        coef = grad_coef(state.loss, yh, ys)
        per_draw = (queried * scale * coef)[:, None] * X
        target_pointwise = _stream_pointwise_target(state, X, p)
        resid = per_draw - target_pointwise
        empirical = per_draw.mean(axis=0)
        target = target_pointwise.mean(axis=0)
        se = resid.std(axis=0, ddof=1) / math.sqrt(n_draws)
        z = np.where(se > 0.0, resid.mean(axis=0) / np.where(se > 0.0, se, 1.0), 0.0)
        return UpdateCheck(empirical, target, z, n_draws)

    X = np.asarray(state.pool, dtype=float)
    p = np.asarray(state.pool_posterior, dtype=float)
    n = len(X)
    yh = margin_scores(state.theta, X)
    u = uncertainty_vec(state.unc, state.loss, yh, p)
    cond_coef = conditional_grad_coef(state.loss, yh, p)
    grads_cond = cond_coef[:, None] * X
    extras: dict = {}

    if state.kind == "pool":
        S = float(np.sum(u))
        if S <= 0.0:
            raise ValueError("pool state has zero total uncertainty")
        law = u / S
        scale_i = np.full(n, S / n) if state.pool_step_scaling == "with_St_over_n" else np.ones(n)
        target = (law * scale_i)[:, None] * grads_cond
        target = target.sum(axis=0)
    elif state.kind == "topk":
        top = top_m_indices(u, state.m)
        law = np.zeros(n)
        law[top] = 1.0 / state.m
        scale_i = np.ones(n)
        target = (law[top])[:, None] * grads_cond[top]
        target = target.sum(axis=0)
        extras["top_indices"] = top
    elif state.kind == "mixture":
        top = top_m_indices(u, state.m)
        law = mixture_weights(n, state.m, state.gamma_mix, top)
        scale_i = np.ones(n)
        target = (law[:, None] * grads_cond).sum(axis=0)
        gamma, m = state.gamma_mix, state.m
        extras["divergence"] = phi_divergence(law)
        extras["divergence_target"] = gamma * gamma * (n - m) / (2.0 * m)
        extras["divergence_residual"] = abs(extras["divergence"] - extras["divergence_target"])
        extras["max_weight"] = float(np.max(law))
        extras["max_weight_target"] = (m + (n - m) * gamma) / (m * n)
        extras["top_indices"] = top
    else:
        raise ValueError(f"unknown frozen state kind {state.kind!r}")

    law = law / law.sum()
    cum = np.cumsum(law)
    sel = rng.random(n_draws)
    idx = np.minimum(np.searchsorted(cum, sel, side="right"), n - 1)
    ys = np.where(rng.random(n_draws) < p[idx], 1.0, -1.0)
    coef = grad_coef(state.loss, yh[idx], ys)
    per_draw = (scale_i[idx] * coef)[:, None] * X[idx]
    empirical = per_draw.mean(axis=0)
    resid = per_draw - target[None, :]
    se = resid.std(axis=0, ddof=1) / math.sqrt(n_draws)
    z = np.where(se > 0.0, resid.mean(axis=0) / np.where(se > 0.0, se, 1.0), 0.0)
    return UpdateCheck(empirical, target, z, n_draws, extras)


# ---------------------------------------------------------------------------
# experiment-level helpers


def equivalent_risk(pair, theta: np.ndarray, X: np.ndarray, p: np.ndarray) -> float:
    """Population equivalent risk on a fixed sample with exact posteriors."""
    from .equivalent_loss import closed_curve

    yh = margin_scores(np.asarray(theta, dtype=float), np.asarray(X, dtype=float))
    if pair.arg_kind == "q":
        from .equivalent_loss import Q_DOMAIN

        arg = np.clip(sigmoid(yh), Q_DOMAIN[0], Q_DOMAIN[1])
        pos = closed_curve(pair, +1)(arg)
        neg = closed_curve(pair, -1)(arg)
    else:
        # margin pairs share one curve in s = y * yhat; the label enters
        # only through the sign of the score
        pos = closed_curve(pair, +1)(yh)
        neg = closed_curve(pair, -1)(-yh)
    return float(np.mean(p * pos + (1.0 - p) * neg))


def squared_risk(loss: LossSpec, theta: np.ndarray, X: np.ndarray, p: np.ndarray) -> float:
    """Mean of L(theta; x)^2 / 2 over the sample, L the posterior-mean loss."""
    yh = margin_scores(np.asarray(theta, dtype=float), np.asarray(X, dtype=float))
    L = conditional_loss_vec(loss, yh, p)
    return float(np.mean(0.5 * L * L))


def minimize_risk(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    value_fn: Callable[[np.ndarray], float],
    theta0: np.ndarray,
    m_theta: float,
    *,
    steps: int = 4000,
    step_size: float = 0.5,
) -> np.ndarray:
    """Projected gradient descent with step halving on non-improvement.

    Reference minimizer for smooth convex empirical risks at desk scale;
    not a general-purpose optimizer.
    """
    theta = np.array(theta0, dtype=float)
    best = value_fn(theta)
    eta = step_size
    for _ in range(steps):
        g = grad_fn(theta)
        cand = project_to_ball(theta - eta * g, m_theta)
        val = value_fn(cand)
        if val <= best:
            theta = cand
            best = val
        else:
            eta *= 0.5
            if eta < 1e-14:
                break
    return theta


def empirical_update_bound(
    loss: LossSpec,
    unc: UncertaintySpec,
    dist: GaussianMixtureOracle,
    m_theta: float,
    *,
    n_draws: int = 20000,
    seed: int = 0,
) -> float:
    """Empirical sup of ||factor(U) * grad|| over random states and draws.

    Stand-in for the Lipschitz constant G of the equivalent objective;
    sampled, not proven, so callers should pad it before use in bounds.
    """
    from .data_io import draw_features

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    X = draw_features(dist, n_draws, rng)
    p = np.atleast_1d(np.asarray(posterior(dist, X), dtype=float))
    worst = 0.0
    for _ in range(16):
        g = rng.standard_normal(dist.dim)
        g /= np.linalg.norm(g)
        radius = m_theta * rng.random() ** (1.0 / dist.dim)
        theta = radius * g
        yh = margin_scores(theta, X)
        u = uncertainty_vec(unc, loss, yh, p)
        factor = effective_update_factor(unc, u)
        ys = np.where(rng.random(n_draws) < p, 1.0, -1.0)
        coef = grad_coef(loss, yh, ys)
        norms = np.abs(factor * coef) * np.linalg.norm(X, axis=1)
        worst = max(worst, float(np.max(norms)))
    return worst


def attach_metrics(
    record: RunRecord,
    loss: LossSpec,
    train: Optional[tuple] = None,
    test: Optional[tuple] = None,
    *,
    use_average: bool = True,
) -> RunRecord:
    """Fill train/test metric columns from snapshots, vectorized post-run.

    Classification losses report accuracy of sign(X theta); squared_error
    reports mean squared error. Metrics evaluate the averaged iterate by
    default since that is the algorithm's output.
    """
    thetas = record.theta_bar_snap if use_average else record.theta_snap

    def metric(X, y):
        scores = thetas @ np.asarray(X, dtype=float).T
        y = np.asarray(y, dtype=float)
        if loss.kind == "squared_error":
            return np.mean((scores - y[None, :]) ** 2, axis=1)
        pred = np.where(scores >= 0.0, 1.0, -1.0)
        return np.mean(pred == y[None, :], axis=1)

    if train is not None:
        record.train_metric = metric(*train)
    if test is not None:
        record.test_metric = metric(*test)
    record.metric_name = "mse" if loss.kind == "squared_error" else "accuracy"
    return record
