"""Pure-Python stream kernel; the reference twin of the compiled extension.

Both backends consume identical pregenerated arrays and perform the same
scalar operations in the same order with double precision, so their outputs
are bit-identical (Python floats and C doubles share IEEE-754 semantics and
the libm transcendentals). Keep every formula and branch in lockstep with
_stream_kernel.pyx; any edit here must be mirrored there.

Loss ids: 0 cross_entropy, 1 squared_margin, 2 logistic, 3 margin,
4 exponential. Uncertainty ids: 0 entropy, 1 least_confidence,
2 margin_based, 3 threshold, 4 exponential, 5 oracle_loss,
6 exp_oracle_loss. clamp_ab: 0 always_query_if_ge_one, 1 clamp_to_one.
"""

from __future__ import annotations

from math import exp, log, log1p, sqrt

BACKEND = "python"

_Q_EPS = 1e-12


def _sigmoid(z: float) -> float:
    if z >= 0.0:
        if z > 700.0:
            return 1.0
        e = exp(-z)
        return 1.0 / (1.0 + e)
    if z < -700.0:
        return 0.0
    e = exp(z)
    return e / (1.0 + e)


def _scalar_loss(lid: int, yhat: float, y: float) -> float:
    if lid == 0:
        q = _sigmoid(yhat)
        if q < _Q_EPS:
            q = _Q_EPS
        elif q > 1.0 - _Q_EPS:
            q = 1.0 - _Q_EPS
        if y > 0.0:
            return -log(q)
        return -log(1.0 - q)
    s = y * yhat
    if lid == 1:
        t = 1.0 - s
        return t * t if t > 0.0 else 0.0
    if lid == 2:
        if s < -37.0:
            return -s
        return log1p(exp(-s))
    if lid == 3:
        t = 1.0 - s
        return t if t > 0.0 else 0.0
    return exp(-s) if s > -700.0 else exp(700.0)


def _dloss_dyhat(lid: int, yhat: float, y: float) -> float:
    if lid == 0:
        q = _sigmoid(yhat)
        return q - (1.0 if y > 0.0 else 0.0)
    s = y * yhat
    if lid == 1:
        t = 1.0 - s
        return -2.0 * t * y if t > 0.0 else 0.0
    if lid == 2:
        if s > 700.0:
            sig = 0.0
        else:
            sig = 1.0 / (1.0 + exp(s))
        return -sig * y
    if lid == 3:
        return -y if s < 1.0 else 0.0
    return -exp(-s) * y if s > -700.0 else -exp(700.0) * y


def _uncertainty_value(
    uid: int, lid: int, yhat: float, mu: float, gamma: float, post: float
) -> float:
    if uid == 0:
        q = _sigmoid(yhat)
        if q < _Q_EPS:
            q = _Q_EPS
        elif q > 1.0 - _Q_EPS:
            q = 1.0 - _Q_EPS
        return -(q * log(q) + (1.0 - q) * log(1.0 - q))
    if uid == 1:
        q = _sigmoid(yhat)
        return q if q < 0.5 else 1.0 - q
    if uid == 2:
        a = yhat if yhat >= 0.0 else -yhat
        return 1.0 / (1.0 + mu * a)
    if uid == 3:
        a = yhat if yhat >= 0.0 else -yhat
        return 1.0 if a <= gamma else 0.0
    if uid == 4:
        a = yhat if yhat >= 0.0 else -yhat
        return exp(-mu * a)
    L = post * _scalar_loss(lid, yhat, 1.0) + (1.0 - post) * _scalar_loss(lid, yhat, -1.0)
    if uid == 5:
        return L
    if L > 700.0:
        L = 700.0
    return exp(L)


def run_segment(
    theta,
    bar,
    X,
    ys,
    coins,
    posts,
    lid: int,
    uid: int,
    mu: float,
    gamma: float,
    clamp_ab: int,
    eta: float,
    m_theta: float,
    t_start: int,
):
    """Advance theta/bar in place over one segment of arrivals.

    Step t = t_start + j processes arrival j: compute U, query iff
    coin <= U, take the (possibly scaled) projected gradient step, then
    fold theta_{t+1} into the running average with weight 1/(t+1).

    Returns (err_step, queries, u_last, queried_last); err_step is -1
    unless a non-finite update coefficient appeared at that step index.
    """
    d = len(theta)
    m = len(ys)
    nq = 0
    u = 0.0
    queried = 0
    for j in range(m):
        t = t_start + j
        xrow = X[j]
        yh = 0.0
        for i in range(d):
            yh += theta[i] * xrow[i]
        u = _uncertainty_value(uid, lid, yh, mu, gamma, posts[j])
        queried = 1 if coins[j] <= u else 0
        if queried:
            nq += 1
            scale = u if (clamp_ab == 0 and u > 1.0) else 1.0
            g = _dloss_dyhat(lid, yh, ys[j])
            coef = eta * scale * g
            if coef != coef or coef == float("inf") or coef == float("-inf"):
                return t, nq, u, queried
            for i in range(d):
                theta[i] -= coef * xrow[i]
            nrm = 0.0
            for i in range(d):
                nrm += theta[i] * theta[i]
            nrm = sqrt(nrm)
            if nrm > m_theta:
                r = m_theta / nrm
                for i in range(d):
                    theta[i] *= r
        c = 1.0 / (t + 1.0)
        omc = 1.0 - c
        for i in range(d):
            bar[i] = omc * bar[i] + c * theta[i]
    return -1, nq, u, queried
