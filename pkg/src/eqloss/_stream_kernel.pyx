# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled stream kernel; the hot twin of _stream_py.

Keep every formula, branch, and evaluation order in lockstep with
_stream_py.run_segment: the two backends must produce bit-identical
trajectories from identical pregenerated inputs. No fast-math, no
reassociation; plain double arithmetic only.
"""

from libc.math cimport exp, log, log1p, sqrt, INFINITY

BACKEND = "compiled"

cdef double _Q_EPS = 1e-12


cdef inline double _sigmoid(double z) noexcept nogil:
    cdef double e
    if z >= 0.0:
        if z > 700.0:
            return 1.0
        e = exp(-z)
        return 1.0 / (1.0 + e)
    if z < -700.0:
        return 0.0
    e = exp(z)
    return e / (1.0 + e)


cdef inline double _scalar_loss(int lid, double yhat, double y) noexcept nogil:
    cdef double q, s, t
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


cdef inline double _dloss_dyhat(int lid, double yhat, double y) noexcept nogil:
    cdef double q, s, t, sig
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


cdef inline double _uncertainty_value(
    int uid, int lid, double yhat, double mu, double gamma, double post
) noexcept nogil:
    cdef double q, a, L
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
    double[::1] theta,
    double[::1] bar,
    double[:, ::1] X,
    double[::1] ys,
    double[::1] coins,
    double[::1] posts,
    int lid,
    int uid,
    double mu,
    double gamma,
    int clamp_ab,
    double eta,
    double m_theta,
    long t_start,
):
    """See _stream_py.run_segment; same contract, same arithmetic."""
    cdef Py_ssize_t d = theta.shape[0]
    cdef Py_ssize_t m = ys.shape[0]
    cdef long nq = 0
    cdef double u = 0.0
    cdef int queried = 0
    cdef Py_ssize_t i, j
    cdef long t
    cdef double yh, scale, g, coef, nrm, r, c, omc
    for j in range(m):
        t = t_start + j
        yh = 0.0
        for i in range(d):
            yh += theta[i] * X[j, i]
        u = _uncertainty_value(uid, lid, yh, mu, gamma, posts[j])
        queried = 1 if coins[j] <= u else 0
        if queried:
            nq += 1
            scale = u if (clamp_ab == 0 and u > 1.0) else 1.0
            g = _dloss_dyhat(lid, yh, ys[j])
            coef = eta * scale * g
            if coef != coef or coef == INFINITY or coef == -INFINITY:
                return t, nq, u, queried
            for i in range(d):
                theta[i] -= coef * X[j, i]
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
