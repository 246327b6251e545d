"""Closed-form equivalent losses and an independent quadrature oracle.

An equivalent loss l~ for a pair (loss l, uncertainty U) satisfies
d l~ / d theta = U * d l / d theta for all theta. For binary models both
sides reduce to functions of one scalar: the margin s = y * theta^T x for
margin models, the predicted probability q for the probabilistic model. The
six pairs below have closed forms; this module carries them verbatim,
including integration constants, and checks them against direct quadrature
of U(arg) * l'(arg).

Pairs with closed forms (by loss kind + uncertainty kind):
  cross_entropy + entropy            argument q
  cross_entropy + least_confidence   argument q
  squared_margin + margin_based(mu)  argument s
  logistic + threshold(gamma)        argument s
  margin + margin_based(mu)          argument s
  exponential + exponential(mu)      argument s, mu in (0, 1)

The probabilistic pairs are only evaluated on q in [1e-6, 1 - 1e-6]; the
cross-entropy derivative is singular at the endpoints and the equivalent
losses are Lipschitz only on compact subsets of (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models_losses import LossSpec, dloss_dmargin, dloss_dprob
from .numerics import PI_SQUARED_OVER_6, Interval, Tolerance, quad, spence
from .uncertainty import UncertaintySpec, uncertainty_scalar

Q_DOMAIN = (1e-6, 1.0 - 1e-6)

# (loss kind, uncertainty kind) -> (short name, scalar argument kind)
CLOSED_FORM_PAIRS = {
    ("cross_entropy", "entropy"): ("entropy", "q"),
    ("cross_entropy", "least_confidence"): ("least_confidence", "q"),
    ("squared_margin", "margin_based"): ("squared_margin", "s"),
    ("logistic", "threshold"): ("threshold", "s"),
    ("margin", "margin_based"): ("hinge", "s"),
    ("exponential", "exponential"): ("exponential", "s"),
}


@dataclass(frozen=True)
class PairSpec:
    """A (loss, uncertainty) pair; closed-form when listed, numeric-only else."""

    loss: LossSpec
    unc: UncertaintySpec

    def __post_init__(self) -> None:
        if self.name == "exponential" and not 0.0 < self.unc.mu < 1.0:
            raise ValueError(
                f"the exponential pair needs mu in (0, 1), got {self.unc.mu}; "
                "the s < 0 branch degenerates at mu = 1"
            )

    @property
    def name(self) -> str | None:
        entry = CLOSED_FORM_PAIRS.get((self.loss.kind, self.unc.kind))
        return entry[0] if entry else None

    @property
    def arg_kind(self) -> str:
        entry = CLOSED_FORM_PAIRS.get((self.loss.kind, self.unc.kind))
        if entry:
            return entry[1]
        return "q" if self.loss.kind == "cross_entropy" else "s"

    @property
    def numeric_only(self) -> bool:
        return self.name is None


def make_pair(loss_kind: str, unc_kind: str, *, mu: float = 1.0, gamma: float = 1.0) -> PairSpec:
    return PairSpec(LossSpec(loss_kind), UncertaintySpec(unc_kind, mu=mu, gamma=gamma))


def branch_points(pair: PairSpec) -> tuple[float, ...]:
    """Scalar-argument points where the closed form switches branch (or the
    integrand has a kink); quadrature and continuity checks split here."""
    name = pair.name
    if name == "entropy":
        return ()
    if name == "least_confidence":
        return (0.5,)
    if name in ("squared_margin", "hinge"):
        return (0.0, 1.0)
    if name == "threshold":
        g = pair.unc.gamma
        return (-g, g)
    if name == "exponential":
        return (0.0,)
    raise ValueError("pair has no closed form")


def _check_q(arg) -> np.ndarray:
    arg = np.asarray(arg, dtype=float)
    if np.any(arg < Q_DOMAIN[0]) or np.any(arg > Q_DOMAIN[1]):
        raise ValueError(f"probabilistic argument outside [{Q_DOMAIN[0]}, {Q_DOMAIN[1]}]")
    return arg


def _closed_entropy(q, y):
    q = _check_q(q)
    ent_part = q * np.log(q) + (1.0 - q) * np.log1p(-q)
    li = spence(q) if y > 0 else spence(1.0 - q)
    return ent_part - li + PI_SQUARED_OVER_6


def _closed_least_confidence(q, y):
    q = _check_q(q)
    log2 = math.log(2.0)
    if y > 0:
        low = -q + log2
        high = -np.log(2.0 * q) - (1.0 - q) + log2
    else:
        low = -np.log(2.0 * (1.0 - q)) - q + log2
        high = -(1.0 - q) + log2
    return np.where(q < 0.5, low, high)


def _closed_squared_margin(s, mu):
    s = np.asarray(s, dtype=float)
    c = (2.0 / mu) * (1.0 / mu + 1.0) * math.log1p(mu) - 2.0 / mu
    neg = -(2.0 / mu) * (1.0 / mu - 1.0) * np.log1p(-mu * np.minimum(s, 0.0)) - (2.0 / mu) * s + c
    mid = -(2.0 / mu) * (1.0 / mu + 1.0) * np.log1p(mu * np.clip(s, 0.0, 1.0)) + (2.0 / mu) * s + c
    return np.where(s <= 0.0, neg, np.where(s < 1.0, mid, 0.0))


def _closed_threshold(s, gamma):
    s = np.asarray(s, dtype=float)
    lo = np.logaddexp(0.0, gamma)
    hi = np.logaddexp(0.0, -gamma)
    mid = np.logaddexp(0.0, -s)
    return np.where(s <= -gamma, lo, np.where(s < gamma, mid, hi))


def _closed_hinge(s, mu):
    s = np.asarray(s, dtype=float)
    c = math.log1p(mu) / mu
    neg = np.log1p(-mu * np.minimum(s, 0.0)) / mu + c
    mid = -np.log1p(mu * np.clip(s, 0.0, 1.0)) / mu + c
    return np.where(s <= 0.0, neg, np.where(s < 1.0, mid, 0.0))


def _closed_exponential(s, mu):
    s = np.asarray(s, dtype=float)
    pos = np.exp(-(1.0 + mu) * np.maximum(s, 0.0)) / (1.0 + mu) + mu / (1.0 + mu)
    neg = np.exp(-(1.0 - mu) * np.minimum(s, 0.0)) / (1.0 - mu) - mu / (1.0 - mu)
    return np.where(s >= 0.0, pos, neg)


def equivalent_loss_closed(pair: PairSpec, y: float, arg):
    """The printed closed-form equivalent loss at scalar argument ``arg``.

    ``arg`` is the predicted probability q for the probabilistic pairs and
    the margin s = y * theta^T x for the margin pairs (where the label only
    enters through s). Accepts scalars or arrays.
    """
    name = pair.name
    if name is None:
        raise ValueError(
            f"pair ({pair.loss.kind}, {pair.unc.kind}) has no closed form; "
            "use equivalent_loss_numeric"
        )
    if name == "entropy":
        out = _closed_entropy(arg, y)
    elif name == "least_confidence":
        out = _closed_least_confidence(arg, y)
    elif name == "squared_margin":
        out = _closed_squared_margin(arg, pair.unc.mu)
    elif name == "threshold":
        out = _closed_threshold(arg, pair.unc.gamma)
    elif name == "hinge":
        out = _closed_hinge(arg, pair.unc.mu)
    else:
        out = _closed_exponential(arg, pair.unc.mu)
    out = np.asarray(out)
    if out.ndim == 0:
        return float(out)
    return out


def closed_curve(pair: PairSpec, y: float):
    """Vectorized closed form as a function of the scalar argument alone."""
    return lambda arg: equivalent_loss_closed(pair, y, arg)


def _integrand(loss: LossSpec, unc: UncertaintySpec, y: float, arg_kind: str):
    if arg_kind == "q":
        return lambda q: uncertainty_scalar(unc, q) * dloss_dprob(q, y)
    # U depends on theta^T x only through |theta^T x| = |s|, so it can be
    # evaluated at the margin directly.
    return lambda s: uncertainty_scalar(unc, s) * dloss_dmargin(loss.kind, s)


def equivalent_loss_numeric(
    loss: LossSpec,
    unc: UncertaintySpec,
    y: float,
    arg: float,
    anchor: float,
) -> float:
    """Independent oracle: integrate U * l' from ``anchor`` to ``arg``.

    Returns closed_value(anchor) + int_anchor^arg U(u) l'(u) du by adaptive
    quadrature, splitting at branch points so each piece is smooth. The only
    shared ingredient with the closed form is its value at the single anchor
    point, so shape errors cannot cancel.
    """
    pair = PairSpec(loss, unc)
    if pair.arg_kind == "q":
        _check_q([arg, anchor])
    base = equivalent_loss_closed(pair, y, anchor)
    if arg == anchor:
        return float(base)
    lo, hi = min(arg, anchor), max(arg, anchor)
    cuts = [lo] + [b for b in branch_points(pair) if lo < b < hi] + [hi]
    f = _integrand(loss, unc, y, pair.arg_kind)
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        total += quad(f, Interval(a, b), Tolerance(abs_tol=1e-12))
    if arg < anchor:
        total = -total
    return float(base + total)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def _panelize(points: np.ndarray, arg_kind: str, h_max: float) -> np.ndarray:
    """Refine a sorted breakpoint sequence into quadrature panel edges.

    Linear subdivision caps the panel width at ``h_max``; for the q argument,
    segments close to the singular endpoints 0/1 are split geometrically so
    the log-type integrand is resolved.
    """
    edges = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        if b <= a:
            continue
        if arg_kind == "q" and b <= 0.05:
            sub = np.exp(np.linspace(math.log(a), math.log(b), 9))
        elif arg_kind == "q" and a >= 0.95:
            sub = 1.0 - np.exp(np.linspace(math.log(1.0 - a), math.log(1.0 - b), 9))
        else:
            n = max(1, int(math.ceil((b - a) / h_max)))
            sub = np.linspace(a, b, n + 1)
        edges.extend(sub[1:].tolist())
    return np.asarray(edges)


def equivalent_loss_numeric_grid(
    loss: LossSpec,
    unc: UncertaintySpec,
    y: float,
    args: np.ndarray,
    anchor: float,
) -> np.ndarray:
    """Vectorized oracle: ``equivalent_loss_numeric`` on a sorted grid.

    One cumulative Gauss-Legendre pass over the union of grid points, branch
    points, and the anchor; panels never straddle a kink. Used for the dense
    closed-vs-numeric golden comparisons where per-point adaptive quadrature
    would be too slow.
    """
    args = np.asarray(args, dtype=float)
    if args.ndim != 1 or args.size < 2 or np.any(np.diff(args) <= 0):
        raise ValueError("args must be a strictly increasing 1-d grid")
    pair = PairSpec(loss, unc)
    if pair.arg_kind == "q":
        _check_q(args)
        _check_q(anchor)
    lo = min(args[0], anchor)
    hi = max(args[-1], anchor)
    inner = [b for b in branch_points(pair) if lo < b < hi]
    points = np.unique(np.concatenate([args, [anchor], inner, [lo, hi]]))
    edges = _panelize(points, pair.arg_kind, h_max=(hi - lo) / 2048.0)

    f = _integrand(loss, unc, y, pair.arg_kind)
    half = 0.5 * (edges[1:] - edges[:-1])
    mid = 0.5 * (edges[1:] + edges[:-1])
    nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
    vals = f(nodes.ravel()).reshape(nodes.shape)
    panel_ints = half * (vals @ _GL_WEIGHTS)

    cum = np.concatenate([[0.0], np.cumsum(panel_ints)])
    cum_at = lambda x: np.interp(x, edges, cum)  # exact at edges; args are edges
    base = equivalent_loss_closed(pair, y, anchor)
    return base + cum_at(args) - float(cum_at(np.asarray([anchor]))[0])


@dataclass(frozen=True)
class ConvexityResult:
    convex: bool
    witness: tuple[float, float, float] | None = None  # (a, midpoint, b)
    gap: float = 0.0

    def __bool__(self) -> bool:
        return self.convex


def convexity_probe(curve, iv: Interval, grid: int = 256) -> ConvexityResult:
    """Midpoint-convexity check of ``curve`` over all grid pairs in ``iv``.

    Declares nonconvex when f((a+b)/2) > (f(a)+f(b))/2 + 1e-10 for some grid
    pair and reports the worst violating triple. Midpoint form stays finite
    at kinks where second differences would blow up.
    """
    if grid < 64:
        raise ValueError(f"grid must be >= 64, got {grid}")
    xs = np.linspace(iv.lo, iv.hi, grid)
    fs = np.asarray(curve(xs), dtype=float)
    mids = 0.5 * (xs[:, None] + xs[None, :])
    fmid = np.asarray(curve(mids.ravel()), dtype=float).reshape(mids.shape)
    chord = 0.5 * (fs[:, None] + fs[None, :])
    viol = fmid - chord
    i, j = np.unravel_index(int(np.argmax(viol)), viol.shape)
    worst = float(viol[i, j])
    if worst > 1e-10:
        a, b = float(xs[i]), float(xs[j])
        return ConvexityResult(False, (a, 0.5 * (a + b), b), worst)
    return ConvexityResult(True, None, worst)


def lipschitz_probe(curve, iv: Interval, grid: int = 2048) -> float:
    """Max absolute slope of ``curve`` between adjacent grid points."""
    if grid < 1024:
        raise ValueError(f"grid must be >= 1024, got {grid}")
    xs = np.linspace(iv.lo, iv.hi, grid)
    fs = np.asarray(curve(xs), dtype=float)
    return float(np.max(np.abs(np.diff(fs) / np.diff(xs))))
