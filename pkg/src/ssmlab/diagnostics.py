"""Residuals, predictive checks, process-noise checks and cross-validation."""
from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from ssmlab.core import (
    ModelDefinition, TimeSeriesData, _split_states, format_float, make_rng, parallel_map,
)
from ssmlab.errors import ConfigurationError, NumericalError, UnsupportedModelError

PIT_CLAMP = 1e-12


# ---------------------------------------------------------------- plumbing

def acf(series, max_lag: int = 10) -> np.ndarray:
    """Sample autocorrelations at lags ``0..max_lag`` (missing values dropped pairwise).

    Lag 0 is exactly 1; for a constant series the other lags are NaN.
    """
    x = np.asarray(series, dtype=float).reshape(-1)
    ok = ~np.isnan(x)
    if ok.sum() <= max_lag + 1:
        raise ConfigurationError(f"series has {int(ok.sum())} values; need more than max_lag + 1 = {max_lag + 1}")
    mu = x[ok].mean()
    xc = np.where(ok, x - mu, 0.0)
    c0 = np.sum(xc * xc) / ok.sum()
    out = np.full(max_lag + 1, np.nan)
    out[0] = 1.0
    if c0 == 0:
        return out
    n = ok.sum()
    for lag in range(1, max_lag + 1):
        out[lag] = np.sum(xc[lag:] * xc[:-lag]) / n / c0
    return out


def ks_test(series, reference: str = "normal") -> tuple[float, float]:
    """Kolmogorov-Smirnov statistic and p-value against N(0, 1) or U(0, 1)."""
    x = np.asarray(series, dtype=float).reshape(-1)
    x = x[~np.isnan(x)]
    if x.size < 1:
        raise ConfigurationError("KS test needs at least one value")
    dist = {"normal": "norm", "std-normal": "norm", "uniform": "uniform"}.get(reference)
    if dist is None:
        raise ConfigurationError("reference must be 'normal' or 'uniform'")
    r = stats.kstest(x, dist)
    return float(r.statistic), float(r.pvalue)


@dataclass
class ResidualSeries:
    """Per-step residuals of one kind; NaN where undefined (e.g. missing data)."""

    kind: str   # response, one-step-ahead, standardized, pit, quantile
    times: np.ndarray
    values: np.ndarray   # (T, p)
    notes: list = field(default_factory=list)

    REFERENCE = {"standardized": "normal", "quantile": "normal", "pit": "uniform"}

    def flat(self) -> np.ndarray:
        v = self.values.reshape(-1)
        return v[~np.isnan(v)]

    def summary(self, max_lag: int = 10) -> dict:
        v = self.flat()
        out = {"kind": self.kind, "n": int(v.size),
               "mean": float(v.mean()) if v.size else None,
               "sd": float(v.std(ddof=1)) if v.size > 1 else None}
        col = self.values[:, 0]
        if np.sum(~np.isnan(col)) > max_lag + 1:
            a = acf(col, max_lag)
            out["acf"] = [None if np.isnan(x) else float(x) for x in a]
            out["acf_band"] = 2.0 / math.sqrt(np.sum(~np.isnan(col)))
        ref = self.REFERENCE.get(self.kind)
        if ref and v.size:
            stat, p = ks_test(v, ref)
            out["ks_reference"] = ref
            out["ks_statistic"] = stat
            out["ks_pvalue"] = p
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def write_residuals(path, series: Mapping[str, ResidualSeries]) -> None:
    """One CSV with a ``time`` column and one column per series and coordinate."""
    items = list(series.items())
    times = items[0][1].times
    cols, data = ["time"], []
    for name, s in items:
        p = s.values.shape[1]
        for j in range(p):
            cols.append(name if p == 1 else f"{name}{j + 1}")
            data.append(s.values[:, j])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in range(times.size):
            fh.write(",".join([format_float(times[t])] + [format_float(c[t]) for c in data]) + "\n")


# ---------------------------------------------------------------- predictive distributions

@dataclass(frozen=True)
class Predictive:
    """One-step predictive mean, variance and PIT of each observation coordinate."""

    mean: np.ndarray
    var: np.ndarray
    pit: np.ndarray
    backend: str


def one_step_predictive(model: ModelDefinition, data, theta=None, backend: str = "auto", *,
                        N: int = 2000, seed: int = 0, grid_cells: int = 400) -> Predictive:
    from ssmlab import discretized, kalman, smc
    from ssmlab.estimation import check_backend
    backend = check_backend(model, backend)
    theta = model.theta(theta)
    sd = model.prepare(data)
    y = sd.y
    if backend == "kalman":
        try:
            fr = kalman.kalman_filter(model, sd, theta)
        except NumericalError as e:
            raise NumericalError(f"degenerate prediction: {e}") from e
        m, v = fr.obs_mean, fr.obs_var
        with np.errstate(divide="ignore", invalid="ignore"):
            u = ndtr((y - m) / np.sqrt(v))
        u = np.where(v > 0, u, np.where(y >= m, 1.0, 0.0))
    elif backend == "grid":
        gr = discretized.grid_filter(model, sd, theta, m=grid_cells)
        p = model.obs_dim
        m, v, u = (np.full((sd.T, p), np.nan) for _ in range(3))
        for t in range(sd.T):
            m[t], v[t] = gr.predictive_moments(t)
            if not np.all(np.isnan(y[t])):
                u[t] = gr.predictive_cdf(t, np.nan_to_num(y[t]))
    elif backend == "particle":
        pf = smc.bootstrap_filter(model, sd, theta, N, seed=seed, predictive=True)
        m, v, u = pf.pred_mean, pf.pred_var, pf.pit
    else:
        raise UnsupportedModelError(f"one-step predictive distributions are not available for backend {backend!r}")
    u = np.where(np.isnan(y), np.nan, np.clip(u, 0.0, 1.0))
    return Predictive(np.asarray(m, float), np.asarray(v, float), u, backend)


# ---------------------------------------------------------------- residuals

def smoothed_states(model: ModelDefinition, data, theta=None, backend: str = "auto") -> np.ndarray:
    """Point estimates of ``z_1..z_T`` given all data, shape ``(T, d)``."""
    from ssmlab import discretized, kalman, laplace
    from ssmlab.estimation import check_backend
    backend = check_backend(model, backend)
    theta = model.theta(theta)
    if backend == "kalman":
        return kalman.kalman_smoother(kalman.kalman_filter(model, data, theta)).mean
    if backend == "grid":
        mean, _ = discretized.grid_filter(model, data, theta).smoothed_moments()
        return mean[:, None]
    if backend == "laplace":
        states = laplace.inner_mode(model, data, theta).states
        return states[-model.prepare(data).T:]
    raise UnsupportedModelError(f"smoothed states are not available for backend {backend!r}")


def response_residuals(model: ModelDefinition, data, theta=None, states=None, backend: str = "auto") -> ResidualSeries:
    """``y_t`` minus the observation mean at the smoothed state (serially dependent by construction)."""
    theta = model.theta(theta)
    sd = model.prepare(data)
    if states is None:
        states = smoothed_states(model, sd, theta, backend)
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    if states.shape[0] == sd.T + 1:
        states = states[1:]
    mu, _ = model.obs_moments(sd, np.arange(sd.T), states, theta)
    res = ResidualSeries("response", sd.times, sd.y - mu)
    res.notes.append("response residuals use all data and are not serially independent")
    return res


def osa_residuals(model: ModelDefinition, data, theta=None, backend: str = "auto", **kw
                  ) -> tuple[ResidualSeries, ResidualSeries]:
    """One-step-ahead residuals and their standardized version."""
    sd = model.prepare(data)
    pr = one_step_predictive(model, sd, theta, backend, **kw)
    raw = sd.y - pr.mean
    observed = ~np.isnan(sd.y)
    if np.any(observed & ~(pr.var > 0)):
        t = int(np.argwhere(observed & ~(pr.var > 0))[0, 0])
        raise NumericalError(f"degenerate prediction: zero predictive variance at step {t}")
    with np.errstate(divide="ignore", invalid="ignore"):
        std = np.where(observed, raw / np.sqrt(pr.var), np.nan)
    return (ResidualSeries("one-step-ahead", sd.times, np.where(observed, raw, np.nan)),
            ResidualSeries("standardized", sd.times, std))


def pit_scores(model: ModelDefinition, data, theta=None, backend: str = "auto", **kw) -> ResidualSeries:
    """Predictive CDF of each observation evaluated at its observed value."""
    sd = model.prepare(data)
    pr = one_step_predictive(model, sd, theta, backend, **kw)
    return ResidualSeries("pit", sd.times, pr.pit)


def quantile_residuals(pit: ResidualSeries) -> ResidualSeries:
    """``Φ^{-1}(u_t)``; PIT values of exactly 0 or 1 are clamped with a warning."""
    u = np.asarray(pit.values, dtype=float)
    out = ResidualSeries("quantile", pit.times, u)
    clamp = (u < PIT_CLAMP) | (u > 1 - PIT_CLAMP)
    if np.any(clamp):
        msg = f"{int(clamp.sum())} PIT value(s) at 0 or 1 clamped to [{PIT_CLAMP:g}, 1 - {PIT_CLAMP:g}]"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        out.notes.append(msg)
    out.values = ndtri(np.clip(u, PIT_CLAMP, 1 - PIT_CLAMP))
    return out


# ---------------------------------------------------------------- posterior predictive checks

def _stat_mean(y, mu):
    v = y[~np.isnan(y)]
    return float(v.mean())


def _stat_sd(y, mu):
    v = y[~np.isnan(y)]
    return float(v.std(ddof=1))


def _stat_ssr(y, mu):
    r = (y - mu)[~np.isnan(y)]
    return float(np.sum(r * r))


STATISTICS = {"mean": _stat_mean, "sd": _stat_sd, "ssr": _stat_ssr}


@dataclass(frozen=True)
class PPCResult:
    statistic: str
    p_value: float
    replicates: np.ndarray   # replicate statistics
    observed: np.ndarray     # observed statistic paired with each replicate
    mode: str
    replicate: str

    @property
    def observed_value(self) -> float:
        return float(self.observed.mean())

    def central(self, level: float = 0.8) -> bool:
        """Observed statistic inside the central ``level`` interval of the replicates."""
        lo, hi = np.quantile(self.replicates, [(1 - level) / 2, (1 + level) / 2])
        return bool(lo <= self.observed_value <= hi)

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value, "observed": self.observed_value,
                "mode": self.mode, "replicate": self.replicate, "n_rep": int(self.replicates.size),
                "replicates": self.replicates.tolist()}


def _draw_source(source, model):
    """``(names, draws (S, k), states or None)`` from a fit, posterior or parameter dict."""
    from ssmlab.bayes import PosteriorSamples
    from ssmlab.estimation import FitResult
    if isinstance(source, PosteriorSamples):
        C, D, k = source.draws.shape
        st = None if source.states is None else source.states.reshape((C * D,) + source.states.shape[2:])
        return source.names, source.draws.reshape(C * D, k), st
    if isinstance(source, FitResult):
        names = tuple(source.names)
        return names, np.array([[source.theta[n] for n in names]]), None
    if isinstance(source, Mapping):
        names = tuple(model.spec.free_names)
        th = model.theta(source)
        return names, np.array([[th[n] for n in names]]), None
    raise ConfigurationError("source must be a FitResult, PosteriorSamples or parameter mapping")


def _conditional_states(model, sd, theta, rng, N=1000):
    from ssmlab import kalman, smc
    if model.has_linear_gaussian:
        return kalman.ffbs_sample(kalman.kalman_filter(model, sd, theta), rng=rng)
    return smc.bootstrap_filter(model, sd, theta, N, rng=rng, sample_trajectory=True).trajectory


def _ppc_rep(i, model, sd, names, draws, states, index, stat, replicate, seed):
    rng = make_rng(seed, 6, i)
    j = index[i]
    theta = model.theta(dict(zip(names, draws[j])))
    T = sd.T
    if replicate == "conditional":
        z = states[j] if states is not None else _conditional_states(model, sd, theta, rng)
        _, z, _ = _split_states(model, theta, z, T)
    else:
        z, _ = model.simulate(sd.data, theta, rng)
    y = np.asarray(model.obs_sample(sd, np.arange(T), z, theta, rng), dtype=float).reshape(T, model.obs_dim)
    y = np.where(np.isnan(sd.y), np.nan, y)
    mu, _ = model.obs_moments(sd, np.arange(T), z, theta)
    return stat(y, mu), stat(sd.y, mu)


def posterior_predictive_check(model: ModelDefinition, source, data, statistic="sd", mode: str = "per-draw",
                               n_rep: int = 200, seed: int = 0, *, replicate: str = "conditional",
                               workers: int = 1) -> PPCResult:
    """Posterior predictive p-value ``p_B = P(T(y_rep) >= T(y))`` (ties count as >=).

    ``source`` is a PosteriorSamples (Bayesian check) or a FitResult /
    parameter mapping (the plug-in frequentist version).  ``per-draw`` pairs
    every replicate with its own parameter draw; ``single-draw`` uses one
    draw for all.  ``replicate='conditional'`` simulates observations given a
    state trajectory drawn from its conditional distribution given the data
    (stored draws, FFBS, or a particle path); ``'marginal'`` simulates new
    states from the process model.
    """
    if mode not in ("per-draw", "single-draw"):
        raise ConfigurationError("mode must be 'per-draw' or 'single-draw'")
    if replicate not in ("conditional", "marginal"):
        raise ConfigurationError("replicate must be 'conditional' or 'marginal'")
    if n_rep < 1:
        raise ConfigurationError("n_rep must be >= 1")
    if n_rep < 20:
        warnings.warn(f"n_rep={n_rep} < 20: the p-value is imprecise", RuntimeWarning, stacklevel=2)
    if callable(statistic):
        stat, stat_name = statistic, getattr(statistic, "__name__", "custom")
    elif statistic in STATISTICS:
        stat, stat_name = STATISTICS[statistic], statistic
    else:
        raise ConfigurationError(f"unknown statistic {statistic!r}; built-ins are {sorted(STATISTICS)}")
    names, draws, states = _draw_source(source, model)
    sd = model.prepare(data)
    rng = make_rng(seed, 7)
    if mode == "single-draw":
        index = np.full(n_rep, int(rng.integers(draws.shape[0])))
    else:
        index = rng.integers(draws.shape[0], size=n_rep)
    fn = functools.partial(_ppc_rep, model=model, sd=sd, names=names, draws=draws, states=states,
                           index=index, stat=stat, replicate=replicate, seed=seed)
    out = parallel_map(fn, range(n_rep), workers)
    rep = np.array([o[0] for o in out])
    obs = np.array([o[1] for o in out])
    return PPCResult(stat_name, float(np.mean(rep >= obs)), rep, obs, mode, replicate)


# ---------------------------------------------------------------- process assumptions

@dataclass(frozen=True)
class ProcessCheck:
    noise: np.ndarray           # implied process noise per step
    standardized: np.ndarray
    mean: float
    mean_pvalue: float          # one-sample t test against 0
    ks_statistic: float | None
    ks_pvalue: float | None     # standardized noise against N(0, 1)
    trend_pvalue: float         # slope of noise against step index

    def to_dict(self) -> dict:
        return {"mean": self.mean, "mean_pvalue": self.mean_pvalue, "ks_statistic": self.ks_statistic,
                "ks_pvalue": self.ks_pvalue, "trend_pvalue": self.trend_pvalue}


def process_assumption_check(model: ModelDefinition, data, states, theta=None) -> ProcessCheck:
    """Invert the process equation at one state trajectory and test the implied noise."""
    theta = model.theta(theta)
    sd = model.prepare(data)
    z0, z, _ = _split_states(model, theta, states, sd.T)
    z_prev = np.vstack([z0, z[:-1]])
    eps, s = model.process_noise(sd, np.arange(sd.T), z, z_prev, theta)
    eps = np.asarray(eps, dtype=float).reshape(sd.T, -1)
    s = np.asarray(s, dtype=float)
    s = np.broadcast_to(s[:, None] if s.ndim == 1 else s, eps.shape)
    e = eps.reshape(-1)
    if np.all(e == 0):
        return ProcessCheck(eps, np.zeros_like(eps), 0.0, 1.0, None, None, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        std = np.where(s > 0, eps / s, np.nan)
    mean_p = float(stats.ttest_1samp(e, 0.0).pvalue)
    flat = std.reshape(-1)
    flat = flat[np.isfinite(flat)]
    ks_stat, ks_p = ks_test(flat, "normal") if flat.size else (None, None)
    slope = stats.linregress(np.arange(e.size, dtype=float), e)
    return ProcessCheck(eps, std, float(e.mean()), mean_p, ks_stat, ks_p, float(slope.pvalue))


# ---------------------------------------------------------------- cross-validation

@dataclass(frozen=True)
class CVResult:
    scheme: str
    fold_scores: np.ndarray      # MSPE per scored fold
    aggregate: float             # mean of fold MSPEs
    predictions: np.ndarray      # (T, p), NaN where not predicted
    skipped: tuple               # folds without any observed held-out value
    folds: tuple                 # (start, stop) per fold, held-out step range

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "aggregate_mspe": self.aggregate,
                "fold_mspe": self.fold_scores.tolist(), "skipped": list(self.skipped),
                "folds": [list(f) for f in self.folds]}


def _fit_theta(model, data, backend, theta_init, refit, fit_kw):
    from ssmlab.estimation import fit_mle
    if not refit:
        return model.theta(theta_init)
    return fit_mle(model, data, backend, theta_init, compute_hessian=False, **fit_kw).theta


def _rolling_group(origins, model, data, backend, theta_init, refit, fit_kw):
    theta = _fit_theta(model, data.head(origins[0]), backend, theta_init, refit, fit_kw)
    out = []
    for t in origins:
        sub = data.head(t + 1).mask_steps([t])
        pr = one_step_predictive(model, sub, theta, backend, **_pred_kw(fit_kw))
        out.append(pr.mean[t])
    return out


def _pred_kw(fit_kw):
    kw = {}
    if "particles" in fit_kw:
        kw["N"] = fit_kw["particles"]
    if "seed" in fit_kw:
        kw["seed"] = fit_kw["seed"]
    if "grid_cells" in fit_kw:
        kw["grid_cells"] = fit_kw["grid_cells"]
    return kw


def smoothed_obs_mean(model: ModelDefinition, data, theta, backend: str = "auto") -> np.ndarray:
    """``E[y_t | observed data]`` per step (exact for linear-Gaussian and grid backends)."""
    from ssmlab import discretized, kalman
    from ssmlab.estimation import check_backend
    backend = check_backend(model, backend)
    theta = model.theta(theta)
    sd = model.prepare(data)
    idx = np.arange(sd.T)
    if backend == "kalman":
        fr = kalman.kalman_filter(model, sd, theta)
        ms = kalman.kalman_smoother(fr).mean
        coef = fr.coef
        return np.einsum("tij,tj->ti", coef.H, ms) + coef.d
    if backend == "grid":
        gr = discretized.grid_filter(model, sd, theta)
        sm = gr.smoothed()
        c = gr.grid.centers
        out = np.empty((sd.T, model.obs_dim))
        for t in range(sd.T):
            mu, _ = model.obs_moments(sd, t, c[:, None], theta)
            out[t] = sm[t] @ mu
        return out
    if backend == "laplace":
        mu, _ = model.obs_moments(sd, idx, smoothed_states(model, sd, theta, "laplace"), theta)
        return mu
    raise UnsupportedModelError(f"held-out block predictions are not available for backend {backend!r}")


def _block_fold(fold, model, data, backend, theta_init, refit, fit_kw):
    start, stop = fold
    steps = np.arange(start, stop)
    masked = data.mask_steps(steps)
    theta = _fit_theta(model, masked, backend, theta_init, refit, fit_kw)
    return smoothed_obs_mean(model, masked, theta, backend)[start:stop]


def cross_validate(model: ModelDefinition, data: TimeSeriesData, scheme: str = "rolling", *,
                   t0: int = 10, refit_every: int = 1, k: int = 5, backend: str = "auto",
                   theta_init: Mapping | None = None, refit: bool = True, workers: int = 1,
                   **fit_kw) -> CVResult:
    """Mean squared prediction error by rolling origin or contiguous k-fold blocks.

    ``rolling``: for each origin ``t >= t0`` fit on the first ``t``
    observations (refitting every ``refit_every`` origins) and predict
    ``y_{t+1}`` one step ahead.  ``block``: hold out each of ``k`` contiguous
    blocks, fit with those steps treated as missing, and predict them from
    the smoothed states.  The aggregate is the mean of the fold MSPEs;
    folds without an observed held-out value are skipped with a warning.
    """
    T = data.T
    y = data.y
    if scheme == "rolling":
        if t0 < 1 or t0 >= T:
            raise ConfigurationError(f"rolling origin t0={t0} must lie in [1, T-1]")
        if refit_every < 1:
            raise ConfigurationError("refit_every must be >= 1")
        origins = list(range(t0, T))
        groups = [origins[i:i + refit_every] for i in range(0, len(origins), refit_every)]
        fn = functools.partial(_rolling_group, model=model, data=data, backend=backend,
                               theta_init=theta_init, refit=refit, fit_kw=fit_kw)
        preds = parallel_map(fn, groups, workers)
        folds = tuple((t, t + 1) for t in origins)
        values = [p for g in preds for p in g]
    elif scheme in ("block", "k-fold-block"):
        if not 2 <= k <= T:
            raise ConfigurationError(f"k={k} must lie in [2, T]")
        edges = np.linspace(0, T, k + 1).round().astype(int)
        folds = tuple((int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]))
        fn = functools.partial(_block_fold, model=model, data=data, backend=backend,
                               theta_init=theta_init, refit=refit, fit_kw=fit_kw)
        blocks = parallel_map(fn, folds, workers)
        values = [row for b in blocks for row in b]
    else:
        raise ConfigurationError("scheme must be 'rolling' or 'block'")
    pred = np.full(y.shape, np.nan)
    scores, skipped = [], []
    pos = 0
    for f, (a, b) in enumerate(folds):
        pred[a:b] = np.asarray(values[pos:pos + b - a])
        pos += b - a
        err = (y[a:b] - pred[a:b])[~np.isnan(y[a:b])]
        if err.size == 0:
            skipped.append(f)
            continue
        scores.append(float(np.mean(err * err)))
    if skipped:
        warnings.warn(f"{len(skipped)} fold(s) had no observed held-out values and were skipped",
                      RuntimeWarning, stacklevel=2)
    scores = np.array(scores)
    agg = float(scores.mean()) if scores.size else math.nan
    return CVResult("rolling" if scheme == "rolling" else "block", scores, agg, pred, tuple(skipped), folds)
