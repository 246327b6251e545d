"""Special functions and numerical primitives shared by every other module.

Everything in here is a pure function of its inputs. The routines are
deliberately small and independent of each other so that each one can serve
as an oracle for derivations elsewhere in the package:

* ``spence`` evaluates the dilogarithm Li2 on [0, 1] (series + reflection),
  and ``quad`` can reconstruct it from the defining integral
  Li2(x) = -int_0^x log(1-u)/u du as a cross-check.
* ``minimize_1d`` is a grid scan plus golden-section refinement, used to
  compute conditional-risk minima H(p) and their sign-constrained variants.
* ``lower_convex_envelope`` computes the greatest convex minorant of sampled
  points, i.e. the Fenchel biconjugate of a piecewise-linear interpolant.
* ``finite_diff_grad`` and ``invert_monotone`` are the generic gradient and
  inverse oracles used by the verification suites.

No routine here depends on the model, loss, or sampling code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ScalarFunction = Callable[[float], float]

PI_SQUARED_OVER_6 = math.pi**2 / 6.0


@dataclass(frozen=True)
class Interval:
    """A finite interval [lo, hi] with lo < hi."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError(f"interval endpoints must be finite, got [{self.lo}, {self.hi}]")
        if not self.lo < self.hi:
            raise ValueError(f"interval requires lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class Tolerance:
    """Numerical stopping criteria: absolute/relative tolerance and an iteration cap."""

    abs_tol: float = 1e-10
    rel_tol: float = 0.0
    max_iter: int = 100_000

    def __post_init__(self) -> None:
        if self.abs_tol <= 0.0:
            raise ValueError(f"abs_tol must be > 0, got {self.abs_tol}")
        if self.rel_tol < 0.0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


def spence(x):
    """Dilogarithm Li2(x) = -int_0^x log(1-u)/u du for x in [0, 1].

    Uses the power series Li2(x) = sum_k x^k / k^2 for x <= 0.5 and the
    reflection identity

        Li2(x) + Li2(1-x) = pi^2/6 - log(x) log(1-x)

    otherwise, so the series argument never exceeds 0.5 and float64 reaches
    absolute error below 1e-15.

    Args:
        x: scalar or ndarray with entries in [0, 1].

    Returns:
        Li2(x), a float for scalar input, ndarray otherwise.

    Raises:
        ValueError: if any entry lies outside [0, 1].
    """
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("spence is only defined here on [0, 1]")

    small = np.where(arr <= 0.5, arr, 1.0 - arr)
    # Series sum_k s^k / k^2 with s <= 0.5: term ratio <= 0.5, ~52 terms suffice.
    total = np.zeros_like(small)
    power = np.ones_like(small)
    for k in range(1, 60):
        power = power * small
        term = power / (k * k)
        total += term
        if float(np.max(term)) < 1e-17:
            break

    with np.errstate(divide="ignore", invalid="ignore"):
        log_x = np.log(arr)
        log_1mx = np.log1p(-arr)
        cross = log_x * log_1mx
    # The reflection cross-term log(x)log(1-x) -> 0 at both endpoints.
    cross = np.where((arr == 0.0) | (arr == 1.0), 0.0, cross)
    reflected = PI_SQUARED_OVER_6 - cross - total
    out = np.where(arr <= 0.5, total, reflected)
    if np.isscalar(x) or arr.ndim == 0:
        return float(out)
    return out


def quad(f: ScalarFunction, iv: Interval, tol: Tolerance = Tolerance(abs_tol=1e-12)) -> float:
    """Adaptive Simpson quadrature of ``f`` over ``iv``.

    Interval bisection with the classic |S_fine - S_coarse| <= 15 * budget
    acceptance test, where each segment receives an error budget proportional
    to its share of the total length. Accepted segments contribute the
    Richardson-extrapolated value S_fine + (S_fine - S_coarse)/15.

    Args:
        f: integrand, finite on the interval (endpoints included).
        iv: integration interval.
        tol: ``abs_tol`` is the target absolute error for the whole interval;
            ``max_iter`` caps the number of interval subdivisions.

    Returns:
        The integral estimate.

    Raises:
        RuntimeError: if the subdivision budget is exhausted before every
            segment meets its error share.
    """

    def simpson(a: float, fa: float, m: float, fm: float, b: float, fb: float) -> float:
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    a, b = iv.lo, iv.hi
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    total_len = b - a
    # Stack entries: (a, fa, m, fm, b, fb, coarse Simpson value).
    stack = [(a, fa, m, fm, b, fb, simpson(a, fa, m, fm, b, fb))]
    result = 0.0
    subdivisions = 0
    while stack:
        a, fa, m, fm, b, fb, coarse = stack.pop()
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(a, fa, lm, flm, m, fm)
        right = simpson(m, fm, rm, frm, b, fb)
        fine = left + right
        budget = tol.abs_tol * (b - a) / total_len
        if abs(fine - coarse) <= 15.0 * budget:
            result += fine + (fine - coarse) / 15.0
            continue
        subdivisions += 1
        if subdivisions > tol.max_iter:
            raise RuntimeError(
                f"quad did not converge within {tol.max_iter} subdivisions on "
                f"[{iv.lo}, {iv.hi}] (stuck near [{a}, {b}])"
            )
        stack.append((a, fa, lm, flm, m, fm, left))
        stack.append((m, fm, rm, frm, b, fb, right))
    return result


GOLDEN_RATIO_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0


def _evaluate_on_grid(f: ScalarFunction, xs: np.ndarray) -> np.ndarray:
    """Evaluate ``f`` on a grid, using a single vectorized call when supported."""
    try:
        ys = np.asarray(f(xs), dtype=float)
        if ys.shape == xs.shape:
            return ys
    except Exception:
        pass
    return np.array([float(f(float(x))) for x in xs], dtype=float)


def minimize_1d(
    f: ScalarFunction,
    iv: Interval,
    tol: Tolerance = Tolerance(abs_tol=1e-10),
    grid: int = 1024,
) -> tuple[float, float]:
    """Global-ish 1-D minimization: grid scan, then golden-section refinement.

    The grid scan (>= 1024 points) guards against missing basins of
    multimodal objectives; golden-section then shrinks the bracket around
    the best grid point until its width is below ``tol.abs_tol``. For a
    unimodal ``f`` the result is within ``abs_tol`` of the true minimizer;
    for multimodal ``f`` it is the best basin found on the grid.

    Args:
        f: continuous objective. May accept an ndarray for the grid pass.
        iv: search interval.
        tol: ``abs_tol`` is the bracket-width target, ``max_iter`` caps
            golden-section iterations.
        grid: number of scan points (floored at 1024).

    Returns:
        (argmin, min value).
    """
    n = max(int(grid), 1024)
    xs = np.linspace(iv.lo, iv.hi, n)
    ys = _evaluate_on_grid(f, xs)
    i = int(np.argmin(ys))
    best_x, best_y = float(xs[i]), float(ys[i])

    a = float(xs[max(i - 1, 0)])
    b = float(xs[min(i + 1, n - 1)])
    if a == b:
        return best_x, best_y
    # Golden-section on the bracket; track the best point ever seen.
    c = b - GOLDEN_RATIO_CONJUGATE * (b - a)
    d = a + GOLDEN_RATIO_CONJUGATE * (b - a)
    fc, fd = float(f(c)), float(f(d))
    for _ in range(tol.max_iter):
        if b - a <= tol.abs_tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN_RATIO_CONJUGATE * (b - a)
            fc = float(f(c))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN_RATIO_CONJUGATE * (b - a)
            fd = float(f(d))
    for x_cand, y_cand in ((c, fc), (d, fd)):
        if y_cand < best_y:
            best_x, best_y = x_cand, y_cand
    mid = 0.5 * (a + b)
    f_mid = float(f(mid))
    if f_mid < best_y:
        best_x, best_y = mid, f_mid
    return best_x, best_y


@dataclass(frozen=True)
class PiecewiseLinear:
    """Piecewise-linear function through ``knots_z``/``knots_v``, linear between knots."""

    knots_z: np.ndarray
    knots_v: np.ndarray

    def __call__(self, z):
        out = np.interp(z, self.knots_z, self.knots_v)
        if np.isscalar(z):
            return float(out)
        return out


def lower_convex_envelope(points: Sequence[tuple[float, float]]) -> PiecewiseLinear:
    """Greatest convex minorant of sampled points on [0, 1].

    Builds the lower hull of the point set with the monotone-chain
    cross-product test; the hull's vertex sequence has nondecreasing slopes,
    so interpolating it linearly gives the largest convex function lying on
    or below every input point. Convex input is reproduced exactly (interior
    hull vertices may be dropped where the input is locally affine, which
    leaves the interpolant unchanged).

    Args:
        points: (z, v) pairs sorted by z with z in [0, 1], at least 3 of them.

    Returns:
        The envelope as a ``PiecewiseLinear`` callable; its knots are the
        hull vertices, which is what kink-location diagnostics inspect.

    Raises:
        ValueError: on fewer than 3 points, unsorted z, or z outside [0, 1].
    """
    pts = [(float(z), float(v)) for z, v in points]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    zs = np.array([p[0] for p in pts])
    if np.any(zs < 0.0) or np.any(zs > 1.0):
        raise ValueError("z coordinates must lie in [0, 1]")
    if np.any(np.diff(zs) <= 0.0):
        raise ValueError("points must be strictly sorted by z")

    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # Keep only left turns: pop while the middle point is on or above
            # the chord, i.e. the cross product is non-positive.
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0.0:
                hull.pop()
            else:
                break
        hull.append(p)
    knots_z = np.array([p[0] for p in hull])
    knots_v = np.array([p[1] for p in hull])
    return PiecewiseLinear(knots_z, knots_v)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of ``f`` at ``x``, one coordinate at a time."""
    if h <= 0.0:
        raise ValueError(f"h must be > 0, got {h}")
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def invert_monotone(
    f: ScalarFunction,
    target: float,
    iv: Interval,
    tol: Tolerance = Tolerance(abs_tol=1e-10),
) -> float:
    """Solve f(z) = target by bisection for nondecreasing ``f`` on ``iv``.

    Args:
        f: nondecreasing function on the interval.
        target: value to invert; must lie within [f(lo), f(hi)] up to abs_tol.
        iv: search interval.
        tol: ``abs_tol`` bounds |f(z) - target| at the returned point.

    Returns:
        z with |f(z) - target| <= abs_tol.

    Raises:
        ValueError: if the target is outside the attained range.
    """
    lo, hi = iv.lo, iv.hi
    f_lo, f_hi = float(f(lo)), float(f(hi))
    if target < f_lo - tol.abs_tol or target > f_hi + tol.abs_tol:
        raise ValueError(f"target {target} outside attained range [{f_lo}, {f_hi}]")
    if abs(f_lo - target) <= tol.abs_tol:
        return lo
    if abs(f_hi - target) <= tol.abs_tol:
        return hi
    for _ in range(tol.max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = float(f(mid))
        if abs(f_mid - target) <= tol.abs_tol or (hi - lo) <= 1e-15 * max(1.0, abs(hi)):
            return mid
        if f_mid < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
