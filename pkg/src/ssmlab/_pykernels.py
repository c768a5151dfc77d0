"""Pure-Python reference versions of the compiled kernels in ``_ckernels.pyx``.

Both modules expose the same functions with the same semantics; the compiled
one is preferred at import time by :mod:`ssmlab.kernels`.
"""
import math

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)


def kalman_scalar(y, F, c, Q, H, d, R, m0, P0):
    """Scalar-state, scalar-observation Kalman filter with time-varying terms.

    NaN entries of ``y`` are missing observations and skip the update.
    Returns ``(mp, Pp, mf, Pf, yhat, S, ll, fail)`` where ``fail`` is the
    0-based step of the first failure or -1.  Failure codes are negated for
    an indefinite predicted variance (``-(t + 2)``).
    """
    T = y.shape[0]
    mp = np.empty(T)
    Pp = np.empty(T)
    mf = np.empty(T)
    Pf = np.empty(T)
    yhat = np.empty(T)
    S = np.empty(T)
    ll = np.zeros(T)
    m = float(m0)
    P = float(P0)
    for t in range(T):
        f = F[t]
        m_pred = f * m + c[t]
        P_pred = f * f * P + Q[t]
        if P_pred < 0.0:
            if P_pred < -1e-10:
                return mp, Pp, mf, Pf, yhat, S, ll, -(t + 2)
            P_pred = 0.0
        h = H[t]
        y_pred = h * m_pred + d[t]
        s = h * h * P_pred + R[t]
        mp[t] = m_pred
        Pp[t] = P_pred
        yhat[t] = y_pred
        S[t] = s
        yt = y[t]
        if yt != yt:
            m = m_pred
            P = P_pred
        else:
            if not s > 0.0:
                return mp, Pp, mf, Pf, yhat, S, ll, t
            v = yt - y_pred
            k = P_pred * h / s
            m = m_pred + k * v
            one_kh = 1.0 - k * h
            P = one_kh * one_kh * P_pred + k * k * R[t]
            ll[t] = -0.5 * (_LOG_2PI + math.log(s) + v * v / s)
        mf[t] = m
        Pf[t] = P
    return mp, Pp, mf, Pf, yhat, S, ll, -1


def systematic_resample(weights, n, u):
    """Indices chosen by systematic resampling with offset ``u`` in [0, 1)."""
    m = weights.shape[0]
    out = np.empty(n, dtype=np.int64)
    i = 0
    cum = weights[0]
    for k in range(n):
        pos = (u + k) / n
        while pos >= cum and i < m - 1:
            i += 1
            cum += weights[i]
        out[k] = i
    return out


def hmm_forward(init, trans, emis):
    """Scaled forward recursion.

    ``init`` is the state distribution before the first scored step,
    ``trans[s]`` the transition matrix into step ``s`` and ``emis[s]`` the
    emission probabilities at step ``s``.  Returns
    ``(loglik, filtered, predicted, fail)`` with ``fail`` the first step whose
    total mass is zero, else -1.
    """
    S, K = emis.shape
    filtered = np.zeros((S, K))
    predicted = np.zeros((S, K))
    alpha = [float(a) for a in init]
    loglik = 0.0
    for s in range(S):
        pred = [0.0] * K
        for j in range(K):
            acc = 0.0
            for i in range(K):
                acc += alpha[i] * trans[s, i, j]
            pred[j] = acc
        total = 0.0
        for j in range(K):
            predicted[s, j] = pred[j]
            alpha[j] = pred[j] * emis[s, j]
            total += alpha[j]
        if not total > 0.0:
            return loglik, filtered, predicted, s
        loglik += math.log(total)
        for j in range(K):
            alpha[j] /= total
            filtered[s, j] = alpha[j]
    return loglik, filtered, predicted, -1
