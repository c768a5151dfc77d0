"""Laplace approximation of the marginal likelihood over continuous latent states.

The joint log-likelihood is maximized over the states by Newton's method.
Its Hessian is banded because every term touches only a short window of
consecutive states, so each Newton step costs a banded Cholesky
factorization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_banded

from ssmlab.core import LOG_2PI, LaplaceProblem, ModelDefinition, StepData
from ssmlab.errors import ModeFindingError, UnsupportedModelError

FD_REL_STEP = 1e-5
MAX_LEVENBERG = 20


@dataclass(frozen=True)
class LaplaceResult:
    states: np.ndarray          # mode in the model's state layout
    latent: np.ndarray          # mode as (n_blocks, block_dim)
    neg_hessian: np.ndarray     # upper banded storage, shape (u + 1, n)
    bandwidth: int
    joint: float                # joint log-likelihood at the mode
    loglik: float               # Laplace marginal log-likelihood
    grad_norm: float
    iterations: int
    converged: bool

    def dense_neg_hessian(self) -> np.ndarray:
        return banded_to_dense(self.neg_hessian, self.bandwidth)


def banded_to_dense(ab: np.ndarray, u: int) -> np.ndarray:
    n = ab.shape[1]
    A = np.zeros((n, n))
    for k in range(u + 1):
        diag = ab[u - k, k:]
        A[np.arange(n - k), np.arange(k, n)] = diag
        A[np.arange(k, n), np.arange(n - k)] = diag
    return A


# ---------------------------------------------------------------- problem construction

def _lg_derivs(model, sd, theta, include_z0):
    """Analytic window derivatives for linear-Gaussian models."""
    coef = model.linear_gaussian(sd, theta)
    T = sd.T
    d = coef.m0.size
    Qinv = np.empty((T, d, d))
    Qlogdet = np.empty(T)
    for t in range(T):
        sign, Qlogdet[t] = np.linalg.slogdet(coef.Q[t])
        if sign <= 0:
            raise ModeFindingError(f"step {t}: singular process covariance (degenerate states)")
        Qinv[t] = np.linalg.inv(coef.Q[t])
    p = sd.y.shape[1]
    Rinv = np.zeros((T, p, p))
    Rconst = np.zeros(T)
    yfill = np.nan_to_num(sd.y)
    for t in range(T):
        obs = ~np.isnan(sd.y[t])
        if obs.any():
            Ro = coef.R[t][np.ix_(obs, obs)]
            sign, ld = np.linalg.slogdet(Ro)
            if sign <= 0:
                raise ModeFindingError(f"step {t}: singular observation covariance")
            Rinv[t][np.ix_(obs, obs)] = np.linalg.inv(Ro)
            Rconst[t] = -0.5 * (obs.sum() * LOG_2PI + ld)
    if include_z0:
        sign, P0logdet = np.linalg.slogdet(coef.P0)
        if sign <= 0:
            raise ModeFindingError("initial covariance must be positive definite")
        P0inv = np.linalg.inv(coef.P0)

    def step_terms(s, zp, z):
        F, c, H, dd = coef.F[s], coef.c[s], coef.H[s], coef.d[s]
        Qi, Ri = Qinv[s], Rinv[s]
        r = z - np.einsum("nij,nj->ni", F, zp) - c
        Qr = np.einsum("nij,nj->ni", Qi, r)
        e = yfill[s] - np.einsum("nij,nj->ni", H, z) - dd
        Re = np.einsum("nij,nj->ni", Ri, e)
        val = (-0.5 * (d * LOG_2PI + Qlogdet[s]) - 0.5 * np.einsum("ni,ni->n", r, Qr)
               + Rconst[s] - 0.5 * np.einsum("ni,ni->n", e, Re))
        FtQ = np.einsum("nji,njk->nik", F, Qi)
        g_prev = np.einsum("nij,nj->ni", FtQ, r)
        g_cur = -Qr + np.einsum("nji,nj->ni", H, Re)
        H_pp = -np.einsum("nij,njk->nik", FtQ, F)
        H_pc = FtQ
        H_cc = -Qi - np.einsum("nji,njk,nkl->nil", H, Ri, H)
        grad = np.concatenate([g_prev, g_cur], axis=1)
        hess = np.concatenate([np.concatenate([H_pp, H_pc], axis=2),
                               np.concatenate([np.swapaxes(H_pc, 1, 2), H_cc], axis=2)], axis=1)
        return val, grad, hess

    def derivs(i, W):
        zp, z = W[:, 0], W[:, 1]
        n = i.size
        if not include_z0:
            return step_terms(i, zp, z)
        val = np.empty(n)
        grad = np.zeros((n, 2 * d))
        hess = np.zeros((n, 2 * d, 2 * d))
        first = i == 0
        rest = ~first
        if rest.any():
            v, g, h = step_terms(i[rest] - 1, zp[rest], z[rest])
            val[rest], grad[rest], hess[rest] = v, g, h
        if first.any():
            r = z[first] - coef.m0
            Pr = r @ P0inv
            val[first] = -0.5 * (d * LOG_2PI + P0logdet) - 0.5 * np.einsum("ni,ni->n", r, Pr)
            grad[first, d:] = -Pr
            hess[first, d:, d:] = -P0inv
        return val, grad, hess

    return derivs


def generic_problem(model: ModelDefinition, sd: StepData, theta) -> LaplaceProblem:
    """First-order Markov representation: term ``t`` is ``log f(z_t|z_{t-1}) + log g(y_t|z_t)``."""
    if model.discrete:
        raise UnsupportedModelError("the Laplace approximation needs continuous states")
    init = model.initial_state(theta)
    b = model.state_dim
    include_z0 = not init.fixed
    n = sd.T + int(include_z0)
    prefix = np.zeros((1, b)) if include_z0 else np.asarray(init.mean, dtype=float).reshape(1, b)
    if include_z0:
        cov = np.atleast_2d(init.cov)
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0:
            raise ModeFindingError("initial covariance must be positive definite")
        cinv = np.linalg.inv(cov)

    def term(i, W):
        zp, z = W[:, 0], W[:, 1]
        if not include_z0:
            return model.process_logpdf(sd, i, z, zp, theta) + model.obs_logpdf(sd, i, z, theta)
        out = np.empty(i.size)
        first = i == 0
        rest = ~first
        if rest.any():
            s = i[rest] - 1
            out[rest] = (model.process_logpdf(sd, s, z[rest], zp[rest], theta)
                         + model.obs_logpdf(sd, s, z[rest], theta))
        if first.any():
            r = z[first] - init.mean
            out[first] = -0.5 * (b * LOG_2PI + logdet) - 0.5 * np.einsum("ni,ij,nj->n", r, cinv, r)
        return out

    x0 = np.asarray(model.laplace_init(sd, theta), dtype=float).reshape(n, b)
    if getattr(model, "laplace_log_scale", False) and not include_z0:
        return _log_scale_problem(term, prefix, x0, n, b)
    derivs = _lg_derivs(model, sd, theta, include_z0) if model.has_linear_gaussian else None
    return LaplaceProblem(block_dim=b, order=1, n_blocks=n, prefix=prefix, term=term,
                          init=x0, to_states=lambda X: X, derivs=derivs)


def _log_scale_problem(term, prefix, x0, n, b) -> LaplaceProblem:
    """Positive states integrated on the log scale, ``w = log z`` (Jacobian ``e^w`` per state).

    The Gaussian approximation is then taken for ``w``, where the densities of
    log-normal growth models are closer to quadratic.
    """
    if np.any(prefix <= 0) or np.any(x0 <= 0):
        raise ModeFindingError("log-scale latent states need positive initial values")

    def log_term(i, W):
        return term(i, np.exp(W)) + W[:, 1].sum(axis=-1)

    return LaplaceProblem(block_dim=b, order=1, n_blocks=n, prefix=np.log(prefix), term=log_term,
                          init=np.log(x0), to_states=np.exp)


def build_problem(model, sd, theta) -> LaplaceProblem:
    prob = model.laplace_problem(sd, theta)
    return prob if prob is not None else generic_problem(model, sd, theta)


# ---------------------------------------------------------------- derivatives

class _Objective:
    def __init__(self, prob: LaplaceProblem):
        self.prob = prob
        k, b, n = prob.order, prob.block_dim, prob.n_blocks
        self.w = (k + 1) * b
        self.idx = np.arange(n)
        # global variable index of each window slot (negative: fixed prefix)
        blocks = self.idx[:, None] + np.arange(-k, 1)[None, :]
        self.gvar = (blocks[:, :, None] * b + np.arange(b)).reshape(n, self.w)
        self.free = self.gvar >= 0
        self.u = self.w - 1
        self.nvar = n * b

    def windows(self, x):
        prob = self.prob
        full = np.concatenate([prob.prefix.reshape(-1), x])
        off = prob.prefix.size
        return full[self.gvar + off].reshape(-1, prob.order + 1, prob.block_dim)

    def value(self, x):
        return float(np.sum(self.prob.term(self.idx, self.windows(x))))

    def derivatives(self, x):
        W = self.windows(x)
        if self.prob.derivs is not None:
            v, g, h = self.prob.derivs(self.idx, W)
            return float(np.sum(v)), g, h
        return self._fd(W)

    def _fd(self, W):
        n = W.shape[0]
        flat = W.reshape(n, self.w)
        shape = W.shape
        h = FD_REL_STEP * (1.0 + np.abs(flat))
        f = lambda V: self.prob.term(self.idx, V.reshape(shape))
        f0 = f(flat)
        fp = np.empty((n, self.w))
        fm = np.empty((n, self.w))
        for j in range(self.w):
            V = flat.copy()
            V[:, j] += h[:, j]
            fp[:, j] = f(V)
            V[:, j] -= 2 * h[:, j]
            fm[:, j] = f(V)
        grad = (fp - fm) / (2 * h)
        hess = np.empty((n, self.w, self.w))
        hess[:, np.arange(self.w), np.arange(self.w)] = (fp - 2 * f0[:, None] + fm) / (h * h)
        for j in range(self.w):
            for l in range(j + 1, self.w):
                acc = 0.0
                for sj, sl in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    V = flat.copy()
                    V[:, j] += sj * h[:, j]
                    V[:, l] += sl * h[:, l]
                    acc = acc + sj * sl * f(V)
                hess[:, j, l] = hess[:, l, j] = acc / (4 * h[:, j] * h[:, l])
        return float(np.sum(f0)), grad, hess

    def assemble(self, grad_w, hess_w):
        """Global gradient and negative Hessian in upper banded storage."""
        g = np.zeros(self.nvar)
        free = self.free
        np.add.at(g, self.gvar[free], grad_w[free])
        ab = np.zeros((self.u + 1, self.nvar))
        gi = self.gvar[:, :, None]
        gj = self.gvar[:, None, :]
        mask = (gi >= 0) & (gj >= 0) & (gi <= gj)
        rows = (self.u + gi - gj)
        cols = np.broadcast_to(gj, rows.shape)
        np.add.at(ab, (rows[mask], cols[mask]), -hess_w[mask])
        return g, ab


def _chol(ab):
    try:
        c = cholesky_banded(ab, lower=False, check_finite=False)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(c)) or np.any(c[-1] <= 0):
        return None
    return c


def _regularized_chol(ab):
    c = _chol(ab)
    if c is not None:
        return c, 0.0
    lam = 1e-8 * max(1.0, float(np.abs(ab[-1]).max()))
    for _ in range(MAX_LEVENBERG):
        reg = ab.copy()
        reg[-1] += lam
        c = _chol(reg)
        if c is not None:
            return c, lam
        lam *= 10.0
    return None, lam


# ---------------------------------------------------------------- public API

def inner_mode(model: ModelDefinition, data, theta=None, z_init=None, tol: float = 1e-8,
               max_iter: int = 100) -> LaplaceResult:
    """Maximize the joint log-likelihood over the latent states."""
    theta = model.theta(theta)
    model.check_theta(theta)
    sd = model.prepare(data)
    prob = build_problem(model, sd, theta)
    obj = _Objective(prob)
    x = np.asarray(prob.init if z_init is None else z_init, dtype=float).reshape(-1).copy()
    if x.size != obj.nvar:
        raise ModeFindingError(f"initial states have {x.size} values, expected {obj.nvar}")
    fval, gw, hw = obj.derivatives(x)
    if not np.isfinite(fval):
        raise ModeFindingError("joint log-likelihood is not finite at the initial states")
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g, ab = obj.assemble(gw, hw)
        if np.max(np.abs(g)) < tol:
            converged = True
            break
        c, lam = _regularized_chol(ab)
        if c is None:
            raise ModeFindingError("curvature is not positive definite after regularization "
                                   "(the state posterior may be multimodal)")
        step = cho_solve_banded((c, False), g, check_finite=False)
        t = 1.0
        for _ in range(40):
            x_new = x + t * step
            f_new = obj.value(x_new)
            if np.isfinite(f_new) and f_new >= fval - 1e-12 * abs(fval):
                break
            t *= 0.5
        else:
            break
        decrement = float(g @ step)
        x = x_new
        fval, gw, hw = obj.derivatives(x)
        if decrement < 1e-20 and lam == 0.0:
            g, _ = obj.assemble(gw, hw)
            converged = bool(np.max(np.abs(g)) < max(tol, 1e-6))
            break
    g, ab = obj.assemble(gw, hw)
    c = _chol(ab)
    if c is None:
        raise ModeFindingError("negative Hessian at the mode is not positive definite")
    logdet = 2.0 * float(np.sum(np.log(c[-1])))
    loglik = fval + 0.5 * obj.nvar * LOG_2PI - 0.5 * logdet
    X = x.reshape(prob.n_blocks, prob.block_dim)
    return LaplaceResult(
        states=np.asarray(prob.to_states(X)), latent=X, neg_hessian=ab, bandwidth=obj.u,
        joint=fval, loglik=float(loglik), grad_norm=float(np.max(np.abs(g))),
        iterations=it, converged=converged or float(np.max(np.abs(g))) < tol,
    )


def laplace_marginal_loglik(model: ModelDefinition, data, theta=None, **kw) -> float:
    return inner_mode(model, data, theta, **kw).loglik


def mode_covariance_draw(res: LaplaceResult, rng: np.random.Generator) -> np.ndarray:
    """Gaussian draw of the latent blocks around the mode (covariance = inverse negative Hessian)."""
    c = cholesky_banded(res.neg_hessian, lower=False)
    e = rng.standard_normal(res.neg_hessian.shape[1])
    # A = U'U, so U^{-1} e has covariance A^{-1}
    dev = solve_banded((0, res.bandwidth), c, e)
    return res.latent + dev.reshape(res.latent.shape)
