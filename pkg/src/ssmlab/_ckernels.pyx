# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.  Semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, M_PI

cnp.import_array()

cdef double _LOG_2PI = log(2.0 * M_PI)


def kalman_scalar(const double[::1] y, const double[::1] F, const double[::1] c,
                  const double[::1] Q, const double[::1] H, const double[::1] d,
                  const double[::1] R, double m0, double P0):
    cdef Py_ssize_t T = y.shape[0]
    cdef Py_ssize_t t
    mp_a = np.empty(T)
    Pp_a = np.empty(T)
    mf_a = np.empty(T)
    Pf_a = np.empty(T)
    yhat_a = np.empty(T)
    S_a = np.empty(T)
    ll_a = np.zeros(T)
    cdef double[::1] mp = mp_a, Pp = Pp_a, mf = mf_a, Pf = Pf_a
    cdef double[::1] yhat = yhat_a, S = S_a, ll = ll_a
    cdef double m = m0, P = P0
    cdef double f, h, m_pred, P_pred, y_pred, s, yt, v, k, one_kh
    cdef Py_ssize_t fail = -1
    for t in range(T):
        f = F[t]
        m_pred = f * m + c[t]
        P_pred = f * f * P + Q[t]
        if P_pred < 0.0:
            if P_pred < -1e-10:
                fail = -(t + 2)
                break
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
                fail = t
                break
            v = yt - y_pred
            k = P_pred * h / s
            m = m_pred + k * v
            one_kh = 1.0 - k * h
            P = one_kh * one_kh * P_pred + k * k * R[t]
            ll[t] = -0.5 * (_LOG_2PI + log(s) + v * v / s)
        mf[t] = m
        Pf[t] = P
    return mp_a, Pp_a, mf_a, Pf_a, yhat_a, S_a, ll_a, fail


def systematic_resample(const double[::1] weights, Py_ssize_t n, double u):
    cdef Py_ssize_t m = weights.shape[0]
    out_a = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_a
    cdef Py_ssize_t i = 0, k
    cdef double cum = weights[0]
    cdef double pos
    for k in range(n):
        pos = (u + k) / n
        while pos >= cum and i < m - 1:
            i += 1
            cum += weights[i]
        out[k] = i
    return out_a


def hmm_forward(const double[::1] init, const double[:, :, ::1] trans,
                const double[:, ::1] emis):
    cdef Py_ssize_t S = emis.shape[0]
    cdef Py_ssize_t K = emis.shape[1]
    filtered_a = np.zeros((S, K))
    predicted_a = np.zeros((S, K))
    cdef double[:, ::1] filtered = filtered_a, predicted = predicted_a
    alpha_a = np.array(init, dtype=np.float64)
    pred_a = np.zeros(K)
    cdef double[::1] alpha = alpha_a, pred = pred_a
    cdef double loglik = 0.0, acc, total
    cdef Py_ssize_t s, i, j
    for s in range(S):
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
            return loglik, filtered_a, predicted_a, s
        loglik += log(total)
        for j in range(K):
            alpha[j] /= total
            filtered[s, j] = alpha[j]
    return loglik, filtered_a, predicted_a, -1
