"""Information criteria and Akaike weights for comparing fitted state-space models."""
from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from ssmlab.core import ModelDefinition, format_float, make_rng, parallel_map, simulate, draw_seed
from ssmlab.errors import ConfigurationError, DomainError, ReliabilityError, SSMError

MODES = ("marginal", "conditional")


@dataclass(frozen=True)
class CriterionReport:
    criterion: str
    value: float
    p_eff: float | None = None
    mode: str = "marginal"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "value": self.value, "p_eff": self.p_eff,
                "mode": self.mode, **self.extra}


def _loglik_k(fit, k):
    if k is None:
        return float(fit.loglik), fit.k
    return float(fit), int(k)


def aic(fit, k: int | None = None) -> float:
    """``-2 log L + 2k``; pass a FitResult, or a log-likelihood and ``k``."""
    ll, k = _loglik_k(fit, k)
    return -2.0 * ll + 2.0 * k


def aicc(fit, T: int | None = None, k: int | None = None) -> float:
    """AIC with the small-sample correction ``2k(k+1)/(T-k-1)``."""
    ll, k = _loglik_k(fit, k)
    if T is None:
        T = fit.T
    if T <= k + 1:
        raise DomainError(f"AICc is undefined for T={T} <= k+1={k + 1}")
    return -2.0 * ll + 2.0 * k + 2.0 * k * (k + 1) / (T - k - 1)


# ---------------------------------------------------------------- bootstrap AIC

@dataclass(frozen=True)
class AICbResult:
    value: float
    penalty: float
    terms: np.ndarray        # -2 log[L(theta_i | y) / L(theta_hat | y)] per successful replicate
    n_failed: int
    n_boot: int

    @property
    def spread(self) -> float:
        return float(self.terms.std(ddof=1)) if self.terms.size > 1 else math.nan

    def to_dict(self) -> dict:
        return {"value": self.value, "penalty": self.penalty, "spread": self.spread,
                "n_failed": self.n_failed, "n_boot": self.n_boot}


def _aicb_rep(i, model, data, fit, seed, fit_kw):
    from ssmlab.estimation import LikelihoodEvaluator, fit_mle
    _, sim = simulate(model, fit.theta, data, seed=draw_seed(make_rng(seed, 4, i)))
    try:
        refit = fit_mle(model, sim, fit.backend, fit.theta, compute_hessian=False, **fit_kw)
    except SSMError:
        return None
    ll = LikelihoodEvaluator(model, data, fit.backend, **fit_kw).safe(refit.theta)
    return ll if math.isfinite(ll) else None


def aicb(model: ModelDefinition, data, fit, N_boot: int = 100, seed: int = 0, *, workers: int = 1,
         max_failure: float = 0.3) -> AICbResult:
    """Parametric-bootstrap AIC.

    Simulates ``N_boot`` datasets at the MLE (keeping the observed missing
    pattern), refits each, and evaluates the refit parameters on the
    original data.  The penalty is twice the mean of
    ``-2 log[L(theta_i | y) / L(theta_hat | y)]``.
    """
    if N_boot < 1:
        raise ConfigurationError("N_boot must be >= 1")
    fit_kw = {k: fit.options[k] for k in ("particles", "seed", "grid_cells") if k in fit.options}
    fn = functools.partial(_aicb_rep, model=model, data=data, fit=fit, seed=seed, fit_kw=fit_kw)
    lls = parallel_map(fn, range(N_boot), workers)
    ok = np.array([v for v in lls if v is not None])
    n_failed = N_boot - ok.size
    if n_failed > max_failure * N_boot:
        raise ReliabilityError(f"{n_failed} of {N_boot} bootstrap refits failed")
    terms = -2.0 * (ok - fit.loglik)
    if np.any(terms < -1e-6):
        warnings.warn("a bootstrap refit beats the MLE on the original data; the fit may not be at its maximum",
                      RuntimeWarning, stacklevel=2)
    penalty = float(2.0 * terms.mean())
    return AICbResult(-2.0 * fit.loglik + penalty, penalty, terms, n_failed, N_boot)


# ---------------------------------------------------------------- posterior-based criteria

def _mean_theta(samples, model):
    """Posterior mean computed on the transformed scale and mapped back."""
    spec = model.spec
    flat = samples.draws.reshape(-1, samples.draws.shape[2])
    theta = [dict(zip(samples.names, row)) for row in flat]
    x = np.array([spec.to_unconstrained(spec.complete(t)) for t in theta])
    return spec.from_unconstrained(x.mean(axis=0))


def _flat_draws(samples, max_draws):
    C, D, _ = samples.draws.shape
    idx = np.arange(C * D)
    if max_draws is not None and idx.size > max_draws:
        idx = np.round(np.linspace(0, idx.size - 1, max_draws)).astype(int)
    flat = samples.draws.reshape(C * D, -1)
    states = None if samples.states is None else samples.states.reshape((C * D,) + samples.states.shape[2:])
    return idx, flat, states


def _conditional_terms(model, sd, theta, states):
    from ssmlab.core import _split_states
    _, z, _ = _split_states(model, theta, states, sd.T)
    return np.asarray(model.obs_logpdf(sd, np.arange(sd.T), z, theta), dtype=float)


def pointwise_loglik(samples, model: ModelDefinition, data, mode: str = "marginal", backend: str = "auto",
                     max_draws: int | None = None) -> np.ndarray:
    """``(S, T)`` matrix of pointwise log-densities over posterior draws.

    Marginal mode uses the one-step predictive terms
    ``log p(y_t | y_{1:t-1}, theta)`` of a deterministic filter, which sum to
    the marginal log-likelihood; conditional mode uses ``log g(y_t | z_t, theta)``
    at the sampled states.
    """
    from ssmlab.estimation import LikelihoodEvaluator
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    idx, flat, states = _flat_draws(samples, max_draws)
    out = np.empty((idx.size, model.prepare(data).T))
    if mode == "marginal":
        if backend == "particle":
            raise ConfigurationError("marginal pointwise terms need a deterministic filter")
        ev = LikelihoodEvaluator(model, data, backend)
        for r, i in enumerate(idx):
            out[r] = ev.terms(model.theta(dict(zip(samples.names, flat[i]))))
        return out
    if states is None:
        raise ConfigurationError("conditional mode needs posterior state draws (gibbs_ffbs or pmmh with states)")
    sd = model.prepare(data)
    for r, i in enumerate(idx):
        out[r] = _conditional_terms(model, sd, model.theta(dict(zip(samples.names, flat[i]))), states[i])
    return out


def _observed_columns(model, data):
    y = model.prepare(data).y
    return np.any(~np.isnan(y), axis=1)


def waic_from_pointwise(L) -> tuple[float, float, np.ndarray]:
    """WAIC, ``p_waic`` and per-point contributions from an ``(S, n)`` matrix."""
    L = np.asarray(L, dtype=float)
    if L.ndim != 2 or L.shape[0] < 2:
        raise ConfigurationError("WAIC needs at least 2 posterior draws (the variance term is undefined)")
    lppd_i = logsumexp(L, axis=0) - math.log(L.shape[0])
    p_i = L.var(axis=0, ddof=1)
    contrib = -2.0 * (lppd_i - p_i)
    return float(contrib.sum()), float(p_i.sum()), contrib


def waic(samples, model: ModelDefinition, data, mode: str = "marginal", backend: str = "auto",
         max_draws: int | None = 1000) -> CriterionReport:
    L = pointwise_loglik(samples, model, data, mode, backend, max_draws)
    L = L[:, _observed_columns(model, data)]
    value, p, contrib = waic_from_pointwise(L)
    return CriterionReport("WAIC", value, p, mode, {"pointwise": contrib.tolist()})


def dic(samples, model: ModelDefinition, data, mode: str = "marginal", backend: str = "auto",
        max_draws: int | None = 1000) -> CriterionReport:
    """Deviance information criterion; negative ``p_D`` is reported as is."""
    from ssmlab.estimation import LikelihoodEvaluator
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    idx, flat, states = _flat_draws(samples, max_draws)
    theta_bar = _mean_theta(samples, model)
    if mode == "marginal":
        ev = LikelihoodEvaluator(model, data, backend)
        dev = np.array([-2.0 * ev(model.theta(dict(zip(samples.names, flat[i])))) for i in idx])
        d_hat = -2.0 * ev(theta_bar)
    else:
        if states is None:
            raise ConfigurationError("conditional DIC needs posterior state draws")
        sd = model.prepare(data)
        dev = np.array([-2.0 * _conditional_terms(model, sd, model.theta(dict(zip(samples.names, flat[i]))),
                                                  states[i]).sum() for i in idx])
        z_bar = states[idx].mean(axis=0)
        d_hat = -2.0 * _conditional_terms(model, sd, theta_bar, z_bar).sum()
    p_d = float(dev.mean() - d_hat)
    return CriterionReport("DIC", float(d_hat + 2.0 * p_d), p_d, mode)


# ---------------------------------------------------------------- weights and tables

def akaike_weights(values: Sequence[float]) -> np.ndarray:
    """``w_i ∝ exp(-Δ_i / 2)`` with ``Δ_i = value_i - min value``."""
    v = np.asarray(values, dtype=float)
    if v.size < 1:
        raise ConfigurationError("need at least one criterion value")
    delta = v - v.min()
    w = np.exp(-0.5 * delta)
    return w / w.sum()


@dataclass(frozen=True)
class ComparisonTable:
    criterion: str
    models: tuple
    values: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.values - self.values.min()

    @property
    def weights(self) -> np.ndarray:
        return akaike_weights(self.values)

    @property
    def best(self) -> str:
        return self.models[int(np.argmin(self.values))]

    def rows(self) -> list:
        return [{"model": m, "criterion": self.criterion, "value": float(v), "delta": float(d), "weight": float(w)}
                for m, v, d, w in zip(self.models, self.values, self.delta, self.weights)]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("model,criterion,value,delta,weight\n")
            for r in self.rows():
                fh.write(",".join([r["model"], r["criterion"], format_float(r["value"]),
                                   format_float(r["delta"]), format_float(r["weight"])]) + "\n")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.rows(), fh, indent=2)


def compare(values: Mapping[str, float], criterion: str = "AIC") -> ComparisonTable:
    """Criterion values for a model set (same data), with deltas and weights."""
    if len(values) < 2:
        raise ConfigurationError("a comparison needs at least two models")
    return ComparisonTable(criterion, tuple(values), np.array([float(v) for v in values.values()]))
