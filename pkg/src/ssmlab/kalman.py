"""Kalman filtering, RTS smoothing, forecasting and FFBS for linear-Gaussian models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ssmlab import kernels
from ssmlab.core import LOG_2PI, LGCoefficients, ModelDefinition, StepData, make_rng
from ssmlab.errors import DomainError, NumericalError, UnsupportedModelError

EIG_TOL = 1e-10


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class FilterResult:
    """Forward pass output; arrays are indexed by step ``t = 0..T-1``."""

    coef: LGCoefficients
    y: np.ndarray
    pred_mean: np.ndarray   # (T, d)
    pred_cov: np.ndarray    # (T, d, d)
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    obs_mean: np.ndarray    # (T, p) one-step predictive mean of y_t
    obs_var: np.ndarray     # (T, p) its marginal variances
    loglik_terms: np.ndarray

    @property
    def loglik(self) -> float:
        return float(self.loglik_terms.sum())

    @property
    def T(self) -> int:
        return self.y.shape[0]

    def predicted(self, t) -> GaussianBelief:
        return GaussianBelief(self.pred_mean[t], self.pred_cov[t])

    def filtered(self, t) -> GaussianBelief:
        return GaussianBelief(self.filt_mean[t], self.filt_cov[t])

    @property
    def initial(self) -> GaussianBelief:
        return GaussianBelief(self.coef.m0, self.coef.P0)


@dataclass(frozen=True)
class SmootherResult:
    mean: np.ndarray        # (T, d)
    cov: np.ndarray         # (T, d, d)
    initial: GaussianBelief  # smoothed z_0

    def belief(self, t) -> GaussianBelief:
        return GaussianBelief(self.mean[t], self.cov[t])


def lg_coefficients(model: ModelDefinition, data, theta=None) -> tuple[StepData, LGCoefficients, dict]:
    if not model.has_linear_gaussian:
        raise UnsupportedModelError(f"{model.name} has no linear-Gaussian representation; "
                                    "use the laplace, grid or particle backend")
    theta = model.theta(theta)
    model.check_theta(theta)
    sd = model.prepare(data)
    coef = model.linear_gaussian(sd, theta)
    if coef is None:
        raise UnsupportedModelError(f"{model.name} (this form) has no linear-Gaussian representation")
    return sd, coef, theta


def _clean_cov(P, t):
    P = 0.5 * (P + P.T)
    if P.shape[0] == 1:
        if P[0, 0] < 0:
            if P[0, 0] < -EIG_TOL:
                raise NumericalError(f"step {t}: covariance has negative variance {P[0, 0]:.3g}")
            P = np.zeros_like(P)
        return P
    w, V = np.linalg.eigh(P)
    if w.min() < 0:
        if w.min() < -EIG_TOL:
            raise NumericalError(f"step {t}: covariance has eigenvalue {w.min():.3g} < -{EIG_TOL}")
        P = (V * np.clip(w, 0.0, None)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def filter_coefficients(coef: LGCoefficients, y: np.ndarray) -> FilterResult:
    """Kalman filter for explicit system matrices; NaN entries of ``y`` are missing."""
    y = np.asarray(y, dtype=float)
    T, p = y.shape
    d = coef.m0.size
    if d == 1 and p == 1:
        return _filter_scalar(coef, y)
    pm = np.empty((T, d))
    pc = np.empty((T, d, d))
    fm = np.empty((T, d))
    fc = np.empty((T, d, d))
    om = np.empty((T, p))
    ov = np.empty((T, p))
    ll = np.zeros(T)
    m = coef.m0.astype(float)
    P = _clean_cov(coef.P0.astype(float), -1)
    I = np.eye(d)
    for t in range(T):
        F, H, R = coef.F[t], coef.H[t], coef.R[t]
        m = F @ m + coef.c[t]
        P = _clean_cov(F @ P @ F.T + coef.Q[t], t)
        pm[t], pc[t] = m, P
        om[t] = H @ m + coef.d[t]
        ov[t] = np.diag(H @ P @ H.T + R)
        obs = ~np.isnan(y[t])
        if obs.any():
            Ho = H[obs]
            Ro = R[np.ix_(obs, obs)]
            S = Ho @ P @ Ho.T + Ro
            S = 0.5 * (S + S.T)
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                raise NumericalError(f"step {t}: innovation covariance is singular") from None
            v = y[t, obs] - om[t, obs]
            PHt = P @ Ho.T
            K = np.linalg.solve(S, PHt.T).T
            m = m + K @ v
            A = I - K @ Ho
            P = _clean_cov(A @ P @ A.T + K @ Ro @ K.T, t)
            w = np.linalg.solve(L, v)
            ll[t] = -0.5 * (obs.sum() * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + w @ w)
        fm[t], fc[t] = m, P
    return FilterResult(coef, y, pm, pc, fm, fc, om, ov, ll)


def _scalar_arrays(coef: LGCoefficients):
    return (np.ascontiguousarray(coef.F[:, 0, 0]), np.ascontiguousarray(coef.c[:, 0]),
            np.ascontiguousarray(coef.Q[:, 0, 0]), np.ascontiguousarray(coef.H[:, 0, 0]),
            np.ascontiguousarray(coef.d[:, 0]), np.ascontiguousarray(coef.R[:, 0, 0]),
            float(coef.m0[0]), float(coef.P0[0, 0]))


def _raise_scalar_failure(fail):
    if fail >= 0:
        raise NumericalError(f"step {fail}: innovation variance is not positive")
    raise NumericalError(f"step {-fail - 2}: predicted variance is negative")


def _filter_scalar(coef, y):
    if coef.P0[0, 0] < -EIG_TOL:
        raise NumericalError("initial variance is negative")
    args = _scalar_arrays(coef)
    mp, Pp, mf, Pf, yhat, S, ll, fail = kernels.kalman_scalar(np.ascontiguousarray(y[:, 0]), *args)
    if fail != -1:
        _raise_scalar_failure(fail)
    return FilterResult(coef, y, mp[:, None], Pp[:, None, None], mf[:, None], Pf[:, None, None],
                        yhat[:, None], S[:, None], ll)


def kalman_filter(model: ModelDefinition, data, theta=None) -> FilterResult:
    """Exact filter and prediction-error-decomposition log-likelihood."""
    sd, coef, _ = lg_coefficients(model, data, theta)
    return filter_coefficients(coef, sd.y)


def kalman_loglik(model: ModelDefinition, data, theta=None) -> float:
    """Marginal log-likelihood only (fast path used by optimizers and samplers)."""
    sd, coef, _ = lg_coefficients(model, data, theta)
    if coef.m0.size == 1 and sd.y.shape[1] == 1:
        y = np.ascontiguousarray(sd.y[:, 0])
        *_, ll, fail = kernels.kalman_scalar(y, *_scalar_arrays(coef))
        if fail != -1:
            _raise_scalar_failure(fail)
        return float(ll.sum())
    return filter_coefficients(coef, sd.y).loglik


def _gain(Pf, F_next, Pp_next):
    """Smoother gain ``Pf F' Pp^+`` (pseudo-inverse covers singular predictions)."""
    A = Pf @ F_next.T
    if Pp_next.shape[0] == 1:
        pp = Pp_next[0, 0]
        return A / pp if pp > 0 else np.zeros_like(A)
    return A @ np.linalg.pinv(Pp_next, hermitian=True)


def kalman_smoother(fr: FilterResult, model: ModelDefinition | None = None, theta=None) -> SmootherResult:
    """Rauch-Tung-Striebel backward pass over a filter result."""
    T = fr.T
    d = fr.filt_mean.shape[1]
    ms = fr.filt_mean.copy()
    Ps = fr.filt_cov.copy()
    F = fr.coef.F
    if d == 1:
        # scalar recursion without per-step matrix overhead
        f = F[:, 0, 0]
        pf = fr.filt_cov[:, 0, 0]
        pp = fr.pred_cov[:, 0, 0]
        mf = fr.filt_mean[:, 0]
        mp = fr.pred_mean[:, 0]
        m_s = ms[:, 0]
        P_s = Ps[:, 0, 0]
        for t in range(T - 2, -1, -1):
            J = pf[t] * f[t + 1] / pp[t + 1] if pp[t + 1] > 0 else 0.0
            m_s[t] = mf[t] + J * (m_s[t + 1] - mp[t + 1])
            P_s[t] = max(pf[t] + J * J * (P_s[t + 1] - pp[t + 1]), 0.0)
        P0 = fr.coef.P0[0, 0]
        J = P0 * f[0] / pp[0] if pp[0] > 0 else 0.0
        m0s = fr.coef.m0 + J * (m_s[0] - mp[0])
        P0s = np.array([[max(P0 + J * J * (P_s[0] - pp[0]), 0.0)]])
        return SmootherResult(ms, Ps, GaussianBelief(np.atleast_1d(m0s), P0s))
    for t in range(T - 2, -1, -1):
        J = _gain(fr.filt_cov[t], F[t + 1], fr.pred_cov[t + 1])
        ms[t] = fr.filt_mean[t] + J @ (ms[t + 1] - fr.pred_mean[t + 1])
        Ps[t] = _clean_cov(fr.filt_cov[t] + J @ (Ps[t + 1] - fr.pred_cov[t + 1]) @ J.T, t)
    J = _gain(fr.coef.P0, F[0], fr.pred_cov[0])
    m0s = fr.coef.m0 + J @ (ms[0] - fr.pred_mean[0])
    P0s = _clean_cov(fr.coef.P0 + J @ (Ps[0] - fr.pred_cov[0]) @ J.T, -1)
    return SmootherResult(ms, Ps, GaussianBelief(m0s, P0s))


def forecast(fr: FilterResult, model: ModelDefinition | None = None, theta=None, k: int = 1,
             coef: LGCoefficients | None = None) -> list[GaussianBelief]:
    """Predictive beliefs for ``z_{T+1..T+k}``.

    Future system matrices repeat the last step's unless ``coef`` (with at
    least ``k`` steps) is given.
    """
    if k < 1:
        raise DomainError("forecast horizon must be >= 1")
    m = fr.filt_mean[-1]
    P = fr.filt_cov[-1]
    out = []
    for j in range(k):
        src, t = (coef, j) if coef is not None else (fr.coef, -1)
        m = src.F[t] @ m + src.c[t]
        P = _clean_cov(src.F[t] @ P @ src.F[t].T + src.Q[t], fr.T + j)
        out.append(GaussianBelief(m.copy(), P.copy()))
    return out


def _psd_factor(P):
    if P.shape[-1] == 1:
        return np.sqrt(np.clip(P, 0.0, None))
    w, V = np.linalg.eigh(0.5 * (P + np.swapaxes(P, -1, -2)))
    return V * np.sqrt(np.clip(w, 0.0, None))[..., None, :]


def ffbs_sample(fr: FilterResult, model: ModelDefinition | None = None, theta=None, seed=None, *,
                rng: np.random.Generator | None = None, n_draws: int | None = None) -> np.ndarray:
    """Exact draw(s) of ``z_{0:T}`` given the data.

    Returns shape ``(T + 1, d)``, or ``(n_draws, T + 1, d)`` when ``n_draws``
    is given.  ``z_0`` is included (constant when the initial state is fixed).
    """
    if rng is None:
        rng = make_rng(seed)
    n = 1 if n_draws is None else int(n_draws)
    T = fr.T
    d = fr.filt_mean.shape[1]
    out = np.empty((n, T + 1, d))
    F = fr.coef.F
    if d == 1:
        f = F[:, 0, 0]
        pf = fr.filt_cov[:, 0, 0]
        pp = fr.pred_cov[:, 0, 0]
        mf = fr.filt_mean[:, 0]
        mp = fr.pred_mean[:, 0]
        eps = rng.standard_normal((T + 1, n))
        z = mf[-1] + np.sqrt(max(pf[-1], 0.0)) * eps[T]
        out[:, T, 0] = z
        for t in range(T - 2, -2, -1):
            if t >= 0:
                Pf_t, m_t = pf[t], mf[t]
            else:
                Pf_t, m_t = fr.coef.P0[0, 0], fr.coef.m0[0]
            if pp[t + 1] > 0:
                J = Pf_t * f[t + 1] / pp[t + 1]
                mean = m_t + J * (z - mp[t + 1])
                var = max(Pf_t - J * f[t + 1] * Pf_t, 0.0)
            else:
                mean, var = np.full(n, m_t), 0.0
            z = mean + np.sqrt(var) * eps[t + 1]
            out[:, t + 1, 0] = z
    else:
        z = fr.filt_mean[-1] + rng.standard_normal((n, d)) @ _psd_factor(fr.filt_cov[-1]).T
        out[:, T] = z
        for t in range(T - 2, -2, -1):
            if t >= 0:
                Pf_t, m_t = fr.filt_cov[t], fr.filt_mean[t]
            else:
                Pf_t, m_t = fr.coef.P0, fr.coef.m0
            J = _gain(Pf_t, F[t + 1], fr.pred_cov[t + 1])
            mean = m_t + (z - fr.pred_mean[t + 1]) @ J.T
            cov = _clean_cov(Pf_t - J @ F[t + 1] @ Pf_t, t)
            z = mean + rng.standard_normal((n, d)) @ _psd_factor(cov).T
            out[:, t + 1] = z
    return out[0] if n_draws is None else out
