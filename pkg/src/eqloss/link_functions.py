"""Link functions: how excess surrogate risk bounds excess binary risk.

For a scalar loss curve l~(yhat, y), the conditional risk at positive-class
probability p is C_p(yhat) = p l~(yhat, +1) + (1-p) l~(yhat, -1). With

    H(p)  = inf over all yhat of C_p(yhat)
    H-(p) = inf over yhat with yhat (2p - 1) <= 0 of C_p(yhat)

the raw transform is psi~(z) = H-((1+z)/2) - H((1+z)/2) and the link is its
lower convex envelope psi = (psi~)** on z in [0, 1]. Excess binary risk z
then satisfies psi(z) <= excess surrogate risk, so the inverse of psi
transfers a surrogate bound into a classification bound.

This module carries the printed closed-form links for the six equivalent
losses and an independent numerical pipeline (grid/golden minimization of
C_p plus convex envelope) that re-derives psi from the loss curve alone.

Convention: printed expansions state the z^2 coefficient as psi''(0), i.e.
psi(z) = psi''(0) z^2 + o(z^2); taylor_coefficient follows that convention
(it returns twice the limit of psi(z)/z^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .equivalent_loss import PairSpec, Q_DOMAIN, equivalent_loss_closed
from .numerics import (
    Interval,
    PiecewiseLinear,
    invert_monotone,
    lower_convex_envelope,
    spence,
)

MARGIN_PREDICTION_BOUND = 20.0
DEFAULT_Z_GRID = 4097


# ----------------------------------------------------------------------
# Closed forms
# ----------------------------------------------------------------------

def threshold_z0(gamma: float) -> float:
    """Kink location of the printed threshold-pair link."""
    a = math.exp(gamma / (1.0 + math.exp(gamma)))
    b = math.exp(-gamma / (1.0 + math.exp(-gamma)))
    return 2.0 / (a + b) - 1.0


def _xlogx(t):
    t = np.asarray(t, dtype=float)
    return np.where(t > 0.0, t * np.log(np.where(t > 0.0, t, 1.0)), 0.0)


def psi_closed(pair: PairSpec, z):
    """Printed closed-form link of ``pair`` at z in [0, 1]; scalar or array."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0.0) or np.any(z > 1.0):
        raise ValueError("z must lie in [0, 1]")
    name = pair.name
    if name == "entropy":
        hp = (1.0 + z) / 2.0
        hm = (1.0 - z) / 2.0
        out = hp * spence(hp) + hm * spence(hm) - spence(0.5) - hp * _safe_log1(1.0 + z) - hm * _safe_log1(1.0 - z)
    elif name == "least_confidence":
        out = (1.0 + z) / 2.0 * np.log1p(z) - z / 2.0
    elif name == "squared_margin":
        mu = pair.unc.mu
        out = (2.0 / mu**2) * (1.0 + mu * z) * np.log1p(mu * z) - (2.0 / mu) * z
    elif name == "threshold":
        z0 = threshold_z0(pair.unc.gamma)
        low = 0.5 * (_xlogx(1.0 + z) + _xlogx(1.0 - z))
        high = 0.5 * ((1.0 + z) * math.log1p(z0) + (1.0 - z) * math.log1p(-z0))
        out = np.where(z <= z0, low, high)
    elif name == "hinge":
        mu = pair.unc.mu
        out = (math.log1p(mu) / mu) * z
    elif name == "exponential":
        mu = pair.unc.mu
        a = (1.0 + mu) / 2.0
        b = (1.0 - mu) / 2.0
        out = (1.0 - mu * z - (1.0 - z) ** a * (1.0 + z) ** b) / (1.0 - mu**2)
    else:
        raise ValueError(f"pair ({pair.loss.kind}, {pair.unc.kind}) has no printed link")
    out = np.asarray(out)
    if out.ndim == 0:
        return float(out)
    return out


def _safe_log1(t):
    """log(t) with the t -> 0+ limit of t*log(t) handled by the caller's factor."""
    t = np.asarray(t, dtype=float)
    return np.log(np.where(t > 0.0, t, 1.0))


# ----------------------------------------------------------------------
# Numerical pipeline
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class TwoBranchCurve:
    """Scalar loss curve split by label: pos(yhat)=l~(yhat,+1), neg(yhat)=l~(yhat,-1).

    ``domain`` is the prediction range searched by the minimizer and
    ``kinks`` are points forced into the search grid.
    """

    pos: Callable
    neg: Callable
    domain: Interval
    kinks: tuple = ()


def pair_curve(pair: PairSpec) -> TwoBranchCurve:
    """Two-branch prediction-space view of a closed-form pair.

    Margin pairs predict yhat = theta^T x in [-B, B]; the probabilistic
    pairs predict q, mapped here to yhat = 2q - 1 in (-1, 1) so the sign
    constraint of H- reads the same for both families.
    """
    if pair.name is None:
        raise ValueError("pair has no closed form to wrap")
    if pair.arg_kind == "q":
        lo, hi = Q_DOMAIN
        to_q = lambda yh: np.clip((1.0 + np.asarray(yh, dtype=float)) / 2.0, lo, hi)
        pos = lambda yh: equivalent_loss_closed(pair, +1, to_q(yh))
        neg = lambda yh: equivalent_loss_closed(pair, -1, to_q(yh))
        dom = Interval(2.0 * lo - 1.0, 2.0 * hi - 1.0)
        kinks = (0.0,) if pair.name == "least_confidence" else ()
        return TwoBranchCurve(pos, neg, dom, kinks)
    B = MARGIN_PREDICTION_BOUND
    pos = lambda yh: equivalent_loss_closed(pair, +1, np.asarray(yh, dtype=float))
    neg = lambda yh: equivalent_loss_closed(pair, -1, -np.asarray(yh, dtype=float))
    if pair.name == "threshold":
        g = pair.unc.gamma
        kinks = (-g, 0.0, g)
    elif pair.name == "exponential":
        kinks = (0.0,)
    else:
        kinks = (-1.0, 0.0, 1.0)
    return TwoBranchCurve(pos, neg, Interval(-B, B), kinks)


def _search_grid(curve: TwoBranchCurve, lo: float, hi: float, n: int) -> np.ndarray:
    base = np.linspace(lo, hi, n)
    extra = [k for k in curve.kinks if lo < k < hi]
    if extra:
        base = np.unique(np.concatenate([base, extra]))
    return base


def _row_minimize(
    curve: TwoBranchCurve,
    p: np.ndarray,
    ygrid: np.ndarray,
    upper: float | None,
    refine_rounds: int = 2,
    fine: int = 65,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """min over yhat of C_p(yhat) for each p, vectorized over rows.

    Coarse grid argmin followed by ``refine_rounds`` of local re-gridding
    around the bracket. ``upper`` clips the search (the H- sign constraint).
    Returns (min values, endpoint-hit mask).
    """
    pos0 = np.asarray(curve.pos(ygrid), dtype=float)
    neg0 = np.asarray(curve.neg(ygrid), dtype=float)
    n = len(ygrid)
    best = np.empty(len(p))
    at_end = np.zeros(len(p), dtype=bool)
    t = np.linspace(0.0, 1.0, fine)
    for start in range(0, len(p), chunk):
        sl = slice(start, min(start + chunk, len(p)))
        pc = p[sl][:, None]
        C = pc * pos0[None, :] + (1.0 - pc) * neg0[None, :]
        j = np.argmin(C, axis=1)
        rows = np.arange(len(j))
        val = C[rows, j]
        at_end[sl] = (j == 0) | (j == n - 1)
        lo = ygrid[np.maximum(j - 1, 0)]
        hi = ygrid[np.minimum(j + 1, n - 1)]
        if upper is not None:
            hi = np.minimum(hi, upper)
            lo = np.minimum(lo, hi)
        for _ in range(refine_rounds):
            local = lo[:, None] + (hi - lo)[:, None] * t[None, :]
            Cl = pc * np.asarray(curve.pos(local), dtype=float) + (1.0 - pc) * np.asarray(
                curve.neg(local), dtype=float
            )
            jj = np.argmin(Cl, axis=1)
            val = np.minimum(val, Cl[rows, jj])
            new_lo = local[rows, np.maximum(jj - 1, 0)]
            new_hi = local[rows, np.minimum(jj + 1, fine - 1)]
            lo, hi = new_lo, new_hi
        best[sl] = val
    return best, at_end


@dataclass(frozen=True)
class RiskCurves:
    """H and H- sampled on a p-grid in [1/2, 1]."""

    p: np.ndarray
    H: np.ndarray
    Hminus: np.ndarray
    saturated_fraction: float


def conditional_risk_curves(curve: TwoBranchCurve, p: np.ndarray, coarse: int = 2049) -> RiskCurves:
    """Minimize C_p over the full range (H) and over yhat <= 0 (H-).

    Valid for p >= 1/2; at p = 1/2 the constraint is vacuous and H-(1/2)
    is set to H(1/2).
    """
    p = np.asarray(p, dtype=float)
    if np.any(p < 0.5) or np.any(p > 1.0):
        raise ValueError("p must lie in [1/2, 1]")
    full = _search_grid(curve, curve.domain.lo, curve.domain.hi, coarse)
    neg_half = _search_grid(curve, curve.domain.lo, 0.0, coarse // 2 + 1)
    H, at_end = _row_minimize(curve, p, full, upper=None)
    Hm, _ = _row_minimize(curve, p, neg_half, upper=0.0)
    Hm = np.where(p == 0.5, H, Hm)
    # the constrained problem can never beat the free one
    Hm = np.maximum(Hm, H)
    return RiskCurves(p, H, Hm, float(np.mean(at_end)))


@dataclass(frozen=True)
class LinkFunction:
    """psi: [0,1] -> [0, inf), nondecreasing, convex, psi(0)=0."""

    eval_fn: Callable
    provenance: str
    envelope: PiecewiseLinear | None = None
    z_grid: np.ndarray | None = None
    psi_tilde: np.ndarray | None = None
    saturated_fraction: float = 0.0

    def __call__(self, z):
        out = np.asarray(self.eval_fn(z), dtype=float)
        if out.ndim == 0:
            return float(out)
        return out


def closed_link(pair: PairSpec) -> LinkFunction:
    return LinkFunction(
        eval_fn=lambda z: psi_closed(pair, z),
        provenance=f"closed_form({pair.name})",
    )


def psi_numeric(equiv_curve: TwoBranchCurve, grid: int = DEFAULT_Z_GRID, provenance: str = "numeric") -> LinkFunction:
    """Re-derive the link from the loss curve alone.

    psi~(z) = H-((1+z)/2) - H((1+z)/2) on a z-grid, then the lower convex
    envelope. The result is convex and nondecreasing by construction; a
    curve with H- = H everywhere yields psi = 0 (not calibrated).
    """
    z = np.linspace(0.0, 1.0, grid)
    rc = conditional_risk_curves(equiv_curve, (1.0 + z) / 2.0)
    tilde = np.maximum(rc.Hminus - rc.H, 0.0)
    env = lower_convex_envelope(np.column_stack([z, tilde]))
    return LinkFunction(
        eval_fn=env,
        provenance=provenance,
        envelope=env,
        z_grid=z,
        psi_tilde=tilde,
        saturated_fraction=rc.saturated_fraction,
    )


def numeric_link(pair: PairSpec, grid: int = DEFAULT_Z_GRID) -> LinkFunction:
    return psi_numeric(pair_curve(pair), grid, provenance=f"numeric({pair.name})")


# ----------------------------------------------------------------------
# Taylor behavior and risk transfer
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class TaylorCoefficient:
    """Leading-order behavior of psi at 0.

    order 2: value = psi''(0), the printed z^2-coefficient convention;
    order 1: value = psi'(0) (linear links have no quadratic coefficient).
    """

    order: int
    value: float


def taylor_coefficient(psi: LinkFunction) -> TaylorCoefficient:
    h1 = 1e-5
    slope = (4.0 * psi(h1) - psi(2.0 * h1)) / (2.0 * h1)
    if slope > 1e-6:
        return TaylorCoefficient(order=1, value=float(slope))
    h = 1e-3
    r1 = psi(h) / h**2
    r2 = psi(2.0 * h) / (2.0 * h) ** 2
    limit = 2.0 * r1 - r2
    return TaylorCoefficient(order=2, value=float(2.0 * limit))


def transfer_risk(psi: LinkFunction, surrogate_excess: float) -> float:
    """psi^{-1}(surrogate_excess), saturating at the trivial bound 1."""
    if surrogate_excess <= 0.0:
        return 0.0
    if surrogate_excess >= psi(1.0):
        return 1.0
    return invert_monotone(lambda t: psi(float(t)), surrogate_excess, Interval(0.0, 1.0))


def affine_tail_onset(psi: LinkFunction, grid: int = 8193, rel_tol: float = 1e-4) -> float:
    """Smallest z past which the link is affine (its slope stays final).

    A convex link that ends in a straight segment has a well-defined onset:
    the last grid cell whose slope deviates from the final slope by more
    than rel_tol (relative to that slope) marks where curvature stops. A
    link that is affine everywhere (or linear) returns 0.
    """
    zs = np.linspace(0.0, 1.0, grid)
    try:
        vals = np.asarray(psi(zs), dtype=float)
        if vals.shape != zs.shape:
            raise TypeError
    except TypeError:
        vals = np.array([float(psi(z)) for z in zs])
    slopes = np.diff(vals) / np.diff(zs)
    final = slopes[-1]
    tol = rel_tol * max(abs(final), 1e-12)
    deviating = np.nonzero(np.abs(slopes - final) > tol)[0]
    if len(deviating) == 0:
        return 0.0
    j = int(deviating[-1]) + 1
    return float(zs[j])
