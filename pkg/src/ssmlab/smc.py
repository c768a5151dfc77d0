"""Sequential importance sampling, the bootstrap particle filter and iterated filtering."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from ssmlab import kernels
from ssmlab.core import ModelDefinition, make_rng
from ssmlab.errors import ConfigurationError, DepletionError, NumericalError, UnsupportedModelError


@dataclass(frozen=True)
class ParticleEnsemble:
    particles: np.ndarray   # (N, d)
    weights: np.ndarray     # (N,), sums to 1

    @property
    def ess(self) -> float:
        return effective_sample_size(self.weights)

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.particles


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.dot(w, w))


def _normalize_log(lw, step):
    top = lw.max()
    if not np.isfinite(top):
        raise DepletionError(f"step {step}: every particle weight underflowed to zero")
    w = np.exp(lw - top)
    s = w.sum()
    return w / s, top + math.log(s)


def systematic_resample(weights, n: int | None = None, seed=None, *, rng=None) -> np.ndarray:
    """Systematic resampling: one uniform offset, ``n`` evenly spaced positions."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise NumericalError("cannot resample: weights are all zero or non-finite")
    if np.any(w < 0):
        raise NumericalError("cannot resample: negative weight")
    n = w.size if n is None else int(n)
    if rng is None:
        rng = make_rng(seed)
    return kernels.systematic_resample(np.ascontiguousarray(w / total), n, float(rng.random()))


@dataclass(frozen=True)
class SISResult:
    means: np.ndarray
    loglik: float
    ess: np.ndarray


def sis_filter(model: ModelDefinition, data, theta=None, N: int = 1000, seed=0) -> SISResult:
    """Sequential importance sampling with the process as proposal (no resampling)."""
    if N < 2:
        raise ConfigurationError("N must be at least 2")
    theta = model.theta(theta)
    model.check_theta(theta)
    sd = model.prepare(data)
    rng = make_rng(seed)
    x = model.sample_initial(theta, N, rng)
    lw = np.zeros(N)
    T = sd.T
    means = np.empty((T, model.state_dim))
    ess = np.empty(T)
    for t in range(T):
        x = model.process_sample(sd, t, x, theta, rng)
        lw = lw + model.obs_logpdf(sd, t, x, theta)
        w, _ = _normalize_log(lw, t)
        means[t] = w @ x
        ess[t] = effective_sample_size(w)
    loglik = float(logsumexp(lw) - math.log(N))
    return SISResult(means, loglik, ess)


@dataclass(frozen=True)
class ParticleFilterResult:
    loglik: float
    loglik_terms: np.ndarray
    filt_mean: np.ndarray
    filt_var: np.ndarray
    ess: np.ndarray
    n_resample: int
    pred_mean: np.ndarray | None = None
    pred_var: np.ndarray | None = None
    pit: np.ndarray | None = None
    trajectory: np.ndarray | None = None


def bootstrap_filter(model: ModelDefinition, data, theta=None, N: int = 1000, seed=0,
                     ess_threshold: float = 0.5, *, predictive: bool = False,
                     sample_trajectory: bool = False, rng=None) -> ParticleFilterResult:
    """Propagate with the process model, weight with the observation density.

    Resamples (systematically) when ESS falls below ``ess_threshold * N``.
    The likelihood estimate multiplies the per-step mean weights and is
    unbiased on the natural scale.  ``predictive`` records one-step
    predictive moments and PIT values of each observation coordinate;
    ``sample_trajectory`` draws one state path ``z_{0:T}`` by tracing
    ancestors from a final-weight draw.
    """
    if N < 1:
        raise ConfigurationError("N must be positive")
    if not 0 < ess_threshold <= 1:
        raise ConfigurationError("ess_threshold must lie in (0, 1]")
    theta = model.theta(theta)
    model.check_theta(theta)
    sd = model.prepare(data)
    if rng is None:
        rng = make_rng(seed)
    T = sd.T
    d = model.state_dim
    x = model.sample_initial(theta, N, rng)
    w = np.full(N, 1.0 / N)
    ll = np.zeros(T)
    fm = np.empty((T, d))
    fv = np.empty((T, d))
    ess = np.empty(T)
    n_res = 0
    if predictive:
        p = model.obs_dim
        pm, pv, pit = np.full((T, p), np.nan), np.full((T, p), np.nan), np.full((T, p), np.nan)
    if sample_trajectory:
        # hist[s] holds the particles of z_s before resampling; parents[s]
        # maps each particle of hist[s + 1] to its ancestor in hist[s]
        hist = np.empty((T + 1, N, d))
        parents = np.tile(np.arange(N), (T, 1))
        hist[0] = x
    for t in range(T):
        x = model.process_sample(sd, t, x, theta, rng)
        if predictive:
            mu, var = model.obs_moments(sd, t, x, theta)
            m1 = w @ mu
            pm[t] = m1
            pv[t] = np.clip(w @ (var + mu * mu) - m1 * m1, 0.0, None)
            yt = sd.y[t]
            if not np.all(np.isnan(yt)):
                u = w @ model.obs_cdf(sd, t, x, np.broadcast_to(np.nan_to_num(yt), (N, yt.size)), theta)
                pit[t] = np.where(np.isnan(yt), np.nan, u)
        with np.errstate(divide="ignore"):
            lw = np.log(w) + model.obs_logpdf(sd, t, x, theta)
        w, ll[t] = _normalize_log(lw, t)
        fm[t] = w @ x
        fv[t] = np.clip(w @ (x * x) - fm[t] ** 2, 0.0, None)
        ess[t] = effective_sample_size(w)
        if sample_trajectory:
            hist[t + 1] = x
            w_last = w
        if ess[t] < ess_threshold * N:
            idx = kernels.systematic_resample(np.ascontiguousarray(w), N, float(rng.random()))
            x = x[idx]
            w = np.full(N, 1.0 / N)
            n_res += 1
            if sample_trajectory and t + 1 < T:
                parents[t + 1] = idx
    traj = None
    if sample_trajectory:
        k = min(int(np.searchsorted(np.cumsum(w_last), rng.random() * w_last.sum(), side="right")), N - 1)
        traj = np.empty((T + 1, d))
        for s_ in range(T, 0, -1):
            traj[s_] = hist[s_][k]
            k = parents[s_ - 1][k]
        traj[0] = hist[0][k]
    out = dict(loglik=float(ll.sum()), loglik_terms=ll, filt_mean=fm, filt_var=fv, ess=ess, n_resample=n_res)
    if predictive:
        out.update(pred_mean=pm, pred_var=pv, pit=pit)
    return ParticleFilterResult(trajectory=traj, **out)


def particle_loglik(model, data, theta=None, N: int = 1000, seed=0, ess_threshold=0.5) -> float:
    return bootstrap_filter(model, data, theta, N, seed, ess_threshold).loglik


# ---------------------------------------------------------------- iterated filtering

@dataclass(frozen=True)
class CoolingSchedule:
    """Per-parameter perturbation SDs (transformed scale) and geometric cooling factor."""

    sds: Mapping[str, float]
    factor: float = 0.97

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigurationError("cooling factor must lie in (0, 1)")
        if any(v < 0 for v in self.sds.values()):
            raise ConfigurationError("perturbation SDs must be nonnegative")


@dataclass(frozen=True)
class IteratedFilteringResult:
    names: tuple
    trace: np.ndarray          # (M + 1, k) natural scale
    trace_unconstrained: np.ndarray
    theta_hat: dict
    loglik: float
    pass_logliks: np.ndarray   # perturbed-filter log-likelihood per pass


def iterated_filtering(model: ModelDefinition, data, theta0=None, schedule: CoolingSchedule | None = None,
                       M: int = 50, N: int = 1000, seed=0, *, final_N: int | None = None
                       ) -> IteratedFilteringResult:
    """IF2: repeated bootstrap filtering of a perturbed parameter swarm.

    Each particle carries its own parameter vector on the transformed
    scale.  Parameters are jittered at the start of every pass and at every
    time step with SDs that shrink geometrically between passes.  The
    swarm carries over from pass to pass; its mean after each pass forms
    the trace.  The returned log-likelihood comes from an ordinary
    bootstrap filter at the final estimate.
    """
    if not model.vectorized_theta:
        raise UnsupportedModelError(f"{model.name} does not accept per-particle parameters")
    spec = model.spec
    names = spec.free_names
    if not names:
        raise ConfigurationError("no free parameters to estimate")
    theta0 = model.theta(theta0)
    x0 = spec.to_unconstrained(theta0)
    k = x0.size
    if schedule is None:
        schedule = CoolingSchedule({n: 0.02 for n in names})
    unknown = set(schedule.sds) - set(names)
    if unknown:
        raise ConfigurationError(f"perturbation SDs given for non-free parameters {sorted(unknown)}")
    sd0 = np.array([schedule.sds.get(n, 0.02) for n in names], dtype=float)
    sd_data = model.prepare(data)
    T = sd_data.T
    X = np.tile(x0, (N, 1))
    center = x0.copy()
    trace = [x0.copy()]
    pass_ll = np.empty(M)
    for m in range(M):
        rng = make_rng(seed, 1, m)
        s = sd0 * schedule.factor ** m
        X = X + rng.standard_normal((N, k)) * s
        th = spec.from_unconstrained(X)
        z = model.sample_initial(th, N, rng)
        ll = 0.0
        for t in range(T):
            if t > 0:
                X = X + rng.standard_normal((N, k)) * s
                th = spec.from_unconstrained(X)
            z = model.process_sample(sd_data, t, z, th, rng)
            with np.errstate(invalid="ignore"):
                lw = model.obs_logpdf(sd_data, t, z, th)
            lw = np.where(np.isnan(lw), -np.inf, lw)
            try:
                w, inc = _normalize_log(lw, t)
            except DepletionError:
                raise DepletionError(f"iterated filtering pass {m}, step {t}: all particle weights underflowed") from None
            ll += inc - math.log(N)
            idx = kernels.systematic_resample(np.ascontiguousarray(w), N, float(rng.random()))
            X = X[idx]
            z = z[idx]
        pass_ll[m] = ll
        center = center + (X - center).mean(axis=0)
        trace.append(center.copy())
    trace_x = np.array(trace)
    trace_nat = np.array([[spec.from_unconstrained(row)[n] for n in names] for row in trace_x])
    theta_hat = spec.from_unconstrained(trace_x[-1])
    final = bootstrap_filter(model, data, theta_hat, final_N or N, seed=None, rng=make_rng(seed, 2))
    return IteratedFilteringResult(tuple(names), trace_nat, trace_x, theta_hat, final.loglik, pass_ll)
