"""Grid-based filtering for scalar continuous states and exact finite-state HMM recursions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ssmlab import kernels
from ssmlab.core import ModelDefinition, StepData
from ssmlab.errors import (
    ConfigurationError, GridCoverageError, ImpossibleDataError, UnsupportedModelError,
)

MIN_MASS = 1e-300


@dataclass(frozen=True)
class StateGrid:
    """``m`` equal-width cells covering ``[lower, upper]``."""

    lower: float
    upper: float
    m: int = 400

    def __post_init__(self):
        if self.m < 2:
            raise ConfigurationError("a state grid needs at least 2 cells")
        if not (math.isfinite(self.lower) and math.isfinite(self.upper) and self.lower < self.upper):
            raise ConfigurationError("grid bounds must be finite with lower < upper")

    @property
    def width(self) -> float:
        return (self.upper - self.lower) / self.m

    @property
    def centers(self) -> np.ndarray:
        return self.lower + self.width * (np.arange(self.m) + 0.5)


@dataclass(frozen=True)
class GridResult:
    """Per-step cell masses; ``pred[t]`` before and ``filt[t]`` after seeing ``y_t``."""

    model: ModelDefinition
    sd: StepData
    theta: dict
    grid: StateGrid
    pred: np.ndarray
    filt: np.ndarray
    loglik_terms: np.ndarray
    transitions: object  # callable t -> (m, m) matrix

    @property
    def loglik(self) -> float:
        return float(self.loglik_terms.sum())

    def _moments(self, masses):
        c = self.grid.centers
        w = masses / masses.sum(axis=1, keepdims=True)
        mean = w @ c
        var = np.clip(w @ (c * c) - mean * mean, 0.0, None)
        return mean, var

    @property
    def filtered_moments(self):
        return self._moments(self.filt)

    def predictive_moments(self, t: int):
        """Mean and variance of ``y_t`` given ``y_{1:t-1}`` (per coordinate)."""
        w = self.pred[t] / self.pred[t].sum()
        z = self.grid.centers[:, None]
        mu, var = self.model.obs_moments(self.sd, t, z, self.theta)
        mean = w @ mu
        second = w @ (var + mu * mu)
        return mean, np.clip(second - mean * mean, 0.0, None)

    def predictive_cdf(self, t: int, y) -> np.ndarray:
        """Mixture-over-cells predictive CDF of ``y_t`` evaluated at ``y``."""
        w = self.pred[t] / self.pred[t].sum()
        z = self.grid.centers[:, None]
        y = np.broadcast_to(np.asarray(y, dtype=float), (self.grid.m, self.model.obs_dim))
        return np.clip(w @ self.model.obs_cdf(self.sd, t, z, y, self.theta), 0.0, 1.0)

    def smoothed(self) -> np.ndarray:
        """Backward pass: cell masses given all data."""
        T = self.filt.shape[0]
        sm = np.empty_like(self.filt)
        sm[-1] = self.filt[-1]
        for t in range(T - 2, -1, -1):
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(self.pred[t + 1] > 0, sm[t + 1] / self.pred[t + 1], 0.0)
            s = self.filt[t] * (self.transitions(t + 1) @ ratio)
            sm[t] = s / s.sum()
        return sm

    def smoothed_moments(self):
        return self._moments(self.smoothed())


def _check_scalar(model):
    if model.state_dim != 1:
        raise UnsupportedModelError(
            f"grid filtering supports one state dimension only; {model.name} has {model.state_dim} "
            "(a 1000-cell grid per dimension would need 1000^d cells)")
    if model.discrete:
        raise UnsupportedModelError("use hmm_forward for finite-state models")


def auto_grid(model: ModelDefinition, data, theta, m: int = 400) -> StateGrid:
    sd = model.prepare(data)
    lo, hi = model.default_grid(sd, model.theta(theta))
    return StateGrid(lo, hi, m)


def grid_filter(model: ModelDefinition, data, theta=None, grid: StateGrid | None = None,
                m: int = 400) -> GridResult:
    """Filter on a fixed grid of cell masses (midpoint-rule transitions).

    The log-likelihood accumulates the per-step normalizing constants.
    """
    _check_scalar(model)
    theta = model.theta(theta)
    model.check_theta(theta)
    sd = model.prepare(data)
    if grid is None:
        lo, hi = model.default_grid(sd, theta)
        grid = StateGrid(lo, hi, m)
    c = grid.centers
    col = c[:, None]
    zi = np.repeat(c, grid.m)[:, None]   # row index -> from
    zj = np.tile(c, grid.m)[:, None]     # column index -> to
    logw = math.log(grid.width)
    cache = {}

    def transition(t):
        key = t if model.process_time_varying else 0
        if key not in cache:
            if model.process_time_varying:
                cache.clear()
            lp = model.process_logpdf(sd, np.full(zi.shape[0], t), zj, zi, theta).reshape(grid.m, grid.m)
            cache[key] = np.exp(lp + logw)
        return cache[key]

    init = model.initial_state(theta)
    if init.fixed:
        z0 = np.broadcast_to(init.mean, (grid.m, 1))
        pred0 = np.exp(model.process_logpdf(sd, np.zeros(grid.m, dtype=int), col, z0, theta) + logw)
    else:
        sd0 = math.sqrt(float(init.cov[0, 0]))
        prior = np.exp(-0.5 * ((c - init.mean[0]) / sd0) ** 2) / (sd0 * math.sqrt(2 * math.pi)) * grid.width
        pred0 = prior @ transition(0)
    T = sd.T
    pred = np.empty((T, grid.m))
    filt = np.empty((T, grid.m))
    ll = np.zeros(T)
    f = None
    for t in range(T):
        p = pred0 if t == 0 else f @ transition(t)
        pred[t] = p
        lg = model.obs_logpdf(sd, t, col, theta)
        top = lg.max()
        u = p * np.exp(lg - top)
        total = u.sum()
        log_total = math.log(total) + top if total > 0 else -math.inf
        if not log_total > math.log(MIN_MASS):
            raise GridCoverageError(f"step {t}: all probability mass left the grid "
                                    f"[{grid.lower:.4g}, {grid.upper:.4g}]; widen the bounds")
        ll[t] = log_total
        f = u / total
        filt[t] = f
    return GridResult(model, sd, theta, grid, pred, filt, ll, transition)


def grid_loglik(model, data, theta=None, grid=None, m=400) -> float:
    return grid_filter(model, data, theta, grid, m).loglik


# ---------------------------------------------------------------- finite-state HMMs

@dataclass(frozen=True)
class HMMResult:
    loglik: float
    chains: list          # HMMChain per independent chain
    filtered: list        # (S, K) per chain
    predicted: list
    T: int

    def loglik_terms(self) -> np.ndarray:
        """Per-step log predictive masses summed across chains."""
        out = np.zeros(self.T)
        for ch, pr in zip(self.chains, self.predicted):
            out[ch.steps] += np.log((pr * ch.emis).sum(axis=1))
        return out


def hmm_forward(model: ModelDefinition, data, theta=None) -> HMMResult:
    """Scaled forward recursion summed over independent chains."""
    if not getattr(model, "discrete", False):
        raise UnsupportedModelError(f"{model.name} is not a finite-state model")
    theta = model.theta(theta)
    model.check_theta(theta)
    sd = model.prepare(data)
    total = 0.0
    chains = model.hmm_chains(sd, theta)
    filt, pred = [], []
    for ch in chains:
        ll, f, p, fail = kernels.hmm_forward(
            np.ascontiguousarray(ch.init, dtype=float), np.ascontiguousarray(ch.trans, dtype=float),
            np.ascontiguousarray(ch.emis, dtype=float))
        if fail != -1:
            raise ImpossibleDataError(
                f"observation at step {ch.steps[fail]} (column {ch.column}) has zero probability under the model")
        total += ll
        filt.append(f)
        pred.append(p)
    return HMMResult(float(total), chains, filt, pred, sd.T)


def hmm_loglik(model, data, theta=None) -> float:
    return hmm_forward(model, data, theta).loglik


def hmm_smooth(res: HMMResult, model: ModelDefinition | None = None) -> list:
    """Smoothed state probabilities ``(S, K)`` per chain."""
    out = []
    for ch, f, p in zip(res.chains, res.filtered, res.predicted):
        S = f.shape[0]
        sm = np.empty_like(f)
        sm[-1] = f[-1]
        for s in range(S - 2, -1, -1):
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(p[s + 1] > 0, sm[s + 1] / p[s + 1], 0.0)
            v = f[s] * (ch.trans[s + 1] @ ratio)
            sm[s] = v / v.sum()
        out.append(sm)
    return out
