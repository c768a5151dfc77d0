"""Constructors for the example state-space models."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln, ndtr, stdtr

from ssmlab.core import (
    IDENTITY, LOG, LOG_2PI, UNIT, InitialState, LaplaceProblem, LGCoefficients,
    ModelDefinition, ParameterSpec, StepData, TimeSeriesData, Transform, norm_logpdf,
)
from ssmlab.errors import (
    ConfigurationError, DataError, DomainError, ImpossibleDataError, UnsupportedModelError,
)


def _obs(sd: StepData, idx, col: int = 0):
    return sd.y[idx, col]


def _masked(y, logp):
    return np.where(np.isnan(y), 0.0, logp)


def _col(z, j=0):
    return z[..., j]


def _grid_around(values, spread, lower=None):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    lo, hi = float(values.min()) - 8.0 * spread, float(values.max()) + 8.0 * spread
    if lower is not None:
        lo = max(lo, lower)
    return lo, hi


class ScalarModel(ModelDefinition):
    """Shared plumbing for models with a scalar state and scalar observation."""

    state_dim = 1
    obs_dim = 1

    def process_mean_sd(self, sd, idx, z_prev, theta):
        raise NotImplementedError

    def process_sample(self, sd, idx, z_prev, theta, rng):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        eps = rng.standard_normal(z_prev.shape[0])
        return (mean + s * eps)[:, None]

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        return norm_logpdf(_col(z), mean, s)

    def obs_mean_sd(self, sd, idx, z, theta):
        raise NotImplementedError

    def obs_logpdf(self, sd, idx, z, theta):
        y = _obs(sd, idx)
        mean, s = self.obs_mean_sd(sd, idx, z, theta)
        return _masked(y, norm_logpdf(np.nan_to_num(y), mean, s))

    def obs_sample(self, sd, idx, z, theta, rng):
        mean, s = self.obs_mean_sd(sd, idx, z, theta)
        return (mean + s * rng.standard_normal(np.shape(mean)))[..., None]

    def obs_moments(self, sd, idx, z, theta):
        mean, s = self.obs_mean_sd(sd, idx, z, theta)
        return mean[..., None], (np.broadcast_to(s, np.shape(mean)) ** 2)[..., None]

    def obs_cdf(self, sd, idx, z, y, theta):
        mean, s = self.obs_mean_sd(sd, idx, z, theta)
        return ndtr((np.asarray(y)[..., 0] - mean) / s)[..., None]

    def process_noise(self, sd, idx, z, z_prev, theta):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        return _col(z) - mean, s


# ---------------------------------------------------------------- toy NDLM

class NDLM(ScalarModel):
    """``z_t = beta z_{t-1} + N(0, sigma_p^2)``, ``y_t = alpha z_t + N(0, sigma_o^2)``."""

    name = "ndlm"

    def __init__(self, spec, initial_sd: float = 0.0):
        super().__init__(spec)
        self.initial_sd = float(initial_sd)

    def check_theta(self, theta):
        super().check_theta(theta)
        if np.any(np.asarray(theta["sigma_p"]) < 0) or np.any(np.asarray(theta["sigma_o"]) < 0):
            raise DomainError("noise scales must be nonnegative")

    def initial_state(self, theta):
        v = self.initial_sd ** 2
        return InitialState(np.array([theta["z0"]], dtype=float), np.array([[v]]), v == 0.0)

    def process_mean_sd(self, sd, idx, z_prev, theta):
        return theta["beta"] * _col(z_prev), theta["sigma_p"]

    def obs_mean_sd(self, sd, idx, z, theta):
        return theta["alpha"] * _col(z), theta["sigma_o"]

    def linear_gaussian(self, sd, theta):
        return LGCoefficients.constant(
            sd.T, [[theta["beta"]]], [0.0], [[theta["sigma_p"] ** 2]],
            [[theta["alpha"]]], [0.0], [[theta["sigma_o"] ** 2]],
            [theta["z0"]], [[self.initial_sd ** 2]],
        )

    def laplace_init(self, sd, theta):
        return _back_project(sd.y[:, 0] / theta["alpha"] if theta["alpha"] != 0 else sd.y[:, 0] * 0,
                             theta["z0"], not self.initial_state(theta).fixed)

    def default_grid(self, sd, theta):
        a = abs(theta["alpha"]) or 1.0
        spread = max(theta["sigma_p"], theta["sigma_o"] / a)
        return _grid_around(np.concatenate([sd.y[:, 0] / a, [theta["z0"]]]), spread)


def _back_project(values, z0, include_z0):
    """Observation back-projection with gaps filled by carrying values forward."""
    v = np.asarray(values, dtype=float).copy()
    last = float(z0)
    for t in range(v.size):
        if np.isfinite(v[t]):
            last = v[t]
        else:
            v[t] = last
    if include_z0:
        v = np.concatenate([[z0], v])
    return v[:, None]


def _spec(entries, fixed):
    return ParameterSpec.build(entries, fixed)


def make_ndlm(alpha=1.0, beta=1.0, sigma_p=0.1, sigma_o=0.1, z0=0.0, *,
              fixed: Sequence[str] = (), initial_sd: float = 0.0) -> NDLM:
    """Toy normal dynamic linear model.

    A noise scale equal to zero is fixed automatically (the log transform
    excludes zero).  ``initial_sd > 0`` replaces the fixed initial state by
    ``z_0 ~ N(z0, initial_sd^2)``.
    """
    if sigma_p < 0 or sigma_o < 0:
        raise DomainError("noise scales must be nonnegative")
    if sigma_p == 0 and sigma_o == 0:
        raise ConfigurationError("sigma_p and sigma_o cannot both be zero")
    fixed = set(fixed)
    for name, v in (("sigma_p", sigma_p), ("sigma_o", sigma_o)):
        if v == 0:
            fixed.add(name)
    spec = _spec([("alpha", alpha, IDENTITY), ("beta", beta, IDENTITY), ("sigma_p", sigma_p, LOG),
                  ("sigma_o", sigma_o, LOG), ("z0", z0, IDENTITY)], fixed)
    return NDLM(spec, initial_sd=initial_sd)


class ProductNDLM(NDLM):
    """Random walk observed through ``y_t = a b z_t + noise``; only ``a b`` is identifiable."""

    name = "product_ndlm"

    def _full(self, theta):
        if "alpha" not in theta:
            theta = dict(theta, alpha=theta["a"] * theta["b"], beta=1.0)
        return theta

    def process_mean_sd(self, sd, idx, z_prev, theta):
        return _col(z_prev), theta["sigma_p"]

    def obs_mean_sd(self, sd, idx, z, theta):
        return theta["a"] * theta["b"] * _col(z), theta["sigma_o"]

    def linear_gaussian(self, sd, theta):
        return super().linear_gaussian(sd, self._full(theta))

    def laplace_init(self, sd, theta):
        return super().laplace_init(sd, self._full(theta))

    def default_grid(self, sd, theta):
        return super().default_grid(sd, self._full(theta))


def make_product_ndlm(a=1.0, b=1.0, sigma_p=0.1, sigma_o=0.1, z0=0.0, *,
                      fixed: Sequence[str] = ("sigma_p", "sigma_o", "z0")) -> ProductNDLM:
    """Deliberately redundant model: ``a`` and ``b`` only enter as a product."""
    spec = _spec([("a", a, LOG), ("b", b, LOG), ("sigma_p", sigma_p, LOG),
                  ("sigma_o", sigma_o, LOG), ("z0", z0, IDENTITY)], fixed)
    return ProductNDLM(spec)


# ---------------------------------------------------------------- logistic

class Logistic(ScalarModel):
    """Stochastic logistic growth, on the natural or the log-state scale."""

    name = "logistic"

    def __init__(self, spec, scale="natural"):
        super().__init__(spec)
        if scale not in ("natural", "log-state"):
            raise ConfigurationError(f"logistic scale must be 'natural' or 'log-state', got {scale!r}")
        self.scale = scale

    def check_theta(self, theta):
        super().check_theta(theta)
        if np.any(np.asarray(theta["beta1"]) > 0):
            raise DomainError("beta1 must be <= 0 (density dependence cannot increase growth)")

    @property
    def laplace_log_scale(self):
        return self.scale == "natural"

    def initial_state(self, theta):
        z0 = theta["z0"] if self.scale == "natural" else np.log(theta["z0"])
        return InitialState(np.array([z0], dtype=float), np.zeros((1, 1)), True)

    def _growth(self, z_prev_natural, theta):
        return theta["beta0"] + theta["beta1"] * z_prev_natural

    def process_mean_sd(self, sd, idx, z_prev, theta):
        # mean of the log-state; the natural-scale density is handled below
        if self.scale == "natural":
            zp = _col(z_prev)
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.log(zp) + self._growth(zp, theta), theta["sigma_p"]
        w = _col(z_prev)
        return w + self._growth(np.exp(w), theta), theta["sigma_p"]

    def process_sample(self, sd, idx, z_prev, theta, rng):
        w = super().process_sample(sd, idx, z_prev, theta, rng)
        return np.exp(w) if self.scale == "natural" else w

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        if self.scale == "natural":
            zt = _col(z)
            with np.errstate(divide="ignore", invalid="ignore"):
                lz = np.log(zt)
                out = norm_logpdf(lz, mean, s) - lz
            return np.where(zt > 0, out, -np.inf)
        return norm_logpdf(_col(z), mean, s)

    def process_noise(self, sd, idx, z, z_prev, theta):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        w = np.log(_col(z)) if self.scale == "natural" else _col(z)
        return w - mean, s

    def obs_mean_sd(self, sd, idx, z, theta):
        x = _col(z) if self.scale == "natural" else np.exp(_col(z))
        return x, theta["sigma_o"]

    def laplace_init(self, sd, theta):
        y = np.clip(sd.y[:, 0], 1e-3 * max(theta["z0"], 1e-8), None)
        v = y if self.scale == "natural" else np.log(y)
        z0 = theta["z0"] if self.scale == "natural" else np.log(theta["z0"])
        return _back_project(v, z0, False)

    def default_grid(self, sd, theta):
        if self.scale == "natural":
            return _grid_around(np.concatenate([sd.y[:, 0], [theta["z0"]]]), theta["sigma_o"], lower=1e-8)
        y = sd.y[:, 0]
        w = np.log(np.clip(y[np.isfinite(y)], 1e-8, None))
        return _grid_around(np.concatenate([w, [np.log(theta["z0"])]]), max(theta["sigma_p"], 0.1))


def make_logistic(beta0=0.5, beta1=-0.01, sigma_p=0.1, sigma_o=1.0, z0=10.0, *,
                  scale="natural", fixed: Sequence[str] = ()) -> Logistic:
    """``z_t = z_{t-1} exp(beta0 + beta1 z_{t-1} + eps_t)``, ``y_t = z_t + eta_t``.

    ``scale="log-state"`` tracks ``w_t = log z_t`` instead; both describe the
    same distribution of observations.
    """
    if beta1 > 0:
        raise DomainError("beta1 must be <= 0 (density dependence cannot increase growth)")
    spec = _spec([("beta0", beta0, IDENTITY), ("beta1", beta1, IDENTITY), ("sigma_p", sigma_p, LOG),
                  ("sigma_o", sigma_o, LOG), ("z0", z0, LOG)], fixed)
    return Logistic(spec, scale=scale)


# ---------------------------------------------------------------- Gompertz

class Gompertz(ScalarModel):
    """Stochastic Gompertz growth with an optional covariate on the growth rate.

    ``form="raw"``: ``z_t = z_{t-1} exp(beta0 + beta1 log z_{t-1} + beta2 p_t + eps_t)``
    observed as ``log y_t = log z_t + eta_t``.
    ``form="linearized"``: ``w_t = beta0 + (1 + beta1) w_{t-1} + beta2 p_t + eps_t``
    and ``g_t = w_t + eta_t``; the data must already be on the log scale.
    """

    name = "gompertz"

    def __init__(self, spec, form="linearized", covariate: str | None = None):
        super().__init__(spec)
        if form not in ("raw", "linearized"):
            raise ConfigurationError(f"gompertz form must be 'raw' or 'linearized', got {form!r}")
        self.form = form
        self.covariate = covariate
        self.process_time_varying = covariate is not None

    @property
    def laplace_log_scale(self):
        return self.form == "raw"

    @property
    def init_name(self):
        return "z0" if self.form == "raw" else "w0"

    def prepare(self, data):
        sd = super().prepare(data)
        if isinstance(data, StepData):
            return sd
        if self.covariate is not None:
            if self.covariate not in data.covariates:
                raise DataError(f"covariate {self.covariate!r} is not present in the data")
            p = data.covariates[self.covariate]
        else:
            p = np.zeros(sd.T)
        return replace(sd, extra={"p": p})

    def initial_state(self, theta):
        return InitialState(np.array([theta[self.init_name]], dtype=float), np.zeros((1, 1)), True)

    def _intercept(self, sd, idx, theta):
        c = theta["beta0"]
        if self.covariate is not None:
            c = c + theta["beta2"] * sd.extra["p"][idx]
        return c

    def process_mean_sd(self, sd, idx, z_prev, theta):
        """Mean and SD of the next log-state."""
        c = self._intercept(sd, idx, theta)
        if self.form == "raw":
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.log(_col(z_prev))
        else:
            w = _col(z_prev)
        return c + (1.0 + theta["beta1"]) * w, theta["sigma_p"]

    def process_sample(self, sd, idx, z_prev, theta, rng):
        w = super().process_sample(sd, idx, z_prev, theta, rng)
        return np.exp(w) if self.form == "raw" else w

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        if self.form == "raw":
            zt = _col(z)
            with np.errstate(divide="ignore", invalid="ignore"):
                lz = np.log(zt)
                out = norm_logpdf(lz, mean, s) - lz
            return np.where(zt > 0, out, -np.inf)
        return norm_logpdf(_col(z), mean, s)

    def process_noise(self, sd, idx, z, z_prev, theta):
        mean, s = self.process_mean_sd(sd, idx, z_prev, theta)
        w = np.log(_col(z)) if self.form == "raw" else _col(z)
        return w - mean, s

    def obs_logpdf(self, sd, idx, z, theta):
        if self.form == "linearized":
            return super().obs_logpdf(sd, idx, z, theta)
        y = _obs(sd, idx)
        with np.errstate(divide="ignore", invalid="ignore"):
            ly = np.log(np.nan_to_num(y, nan=1.0))
            out = norm_logpdf(ly, np.log(_col(z)), theta["sigma_o"]) - ly
        return _masked(y, out)

    def obs_mean_sd(self, sd, idx, z, theta):
        return _col(z), theta["sigma_o"]

    def obs_sample(self, sd, idx, z, theta, rng):
        if self.form == "linearized":
            return super().obs_sample(sd, idx, z, theta, rng)
        ly = np.log(_col(z)) + theta["sigma_o"] * rng.standard_normal(_col(z).shape)
        return np.exp(ly)[..., None]

    def obs_moments(self, sd, idx, z, theta):
        if self.form == "linearized":
            return super().obs_moments(sd, idx, z, theta)
        s2 = np.asarray(theta["sigma_o"]) ** 2
        zz = _col(z)
        mean = zz * np.exp(s2 / 2)
        var = (np.exp(s2) - 1.0) * np.exp(s2) * zz * zz
        return mean[..., None], var[..., None]

    def obs_cdf(self, sd, idx, z, y, theta):
        if self.form == "linearized":
            return super().obs_cdf(sd, idx, z, y, theta)
        yy = np.asarray(y)[..., 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = ndtr((np.log(yy) - np.log(_col(z))) / theta["sigma_o"])
        return np.where(yy > 0, u, 0.0)[..., None]

    def linear_gaussian(self, sd, theta):
        if self.form != "linearized":
            return None
        T = sd.T
        c = np.broadcast_to(self._intercept(sd, np.arange(T), theta), (T,)).reshape(T, 1)
        coef = LGCoefficients.constant(
            T, [[1.0 + theta["beta1"]]], [0.0], [[theta["sigma_p"] ** 2]],
            [[1.0]], [0.0], [[theta["sigma_o"] ** 2]], [theta["w0"]], [[0.0]],
        )
        return replace(coef, c=np.array(c, dtype=float))

    @property
    def has_linear_gaussian(self):
        return self.form == "linearized"

    def laplace_init(self, sd, theta):
        if self.form == "raw":
            y = sd.y[:, 0]
            return np.exp(_back_project(np.log(y), np.log(theta["z0"]), False))
        return _back_project(sd.y[:, 0], theta["w0"], False)

    def default_grid(self, sd, theta):
        spread = max(theta["sigma_p"], theta["sigma_o"])
        if self.form == "raw":
            y = sd.y[:, 0]
            w = np.log(y[np.isfinite(y) & (y > 0)])
            lo, hi = _grid_around(np.concatenate([w, [np.log(theta["z0"])]]), spread)
            return math.exp(lo), math.exp(hi)
        return _grid_around(np.concatenate([sd.y[:, 0], [theta["w0"]]]), spread)


def make_gompertz(beta0=1.0, beta1=-0.5, sigma_p=0.1, sigma_o=0.1, init=None, *,
                  form="linearized", covariate: str | None = None, beta2=0.0,
                  fixed: Sequence[str] = ()) -> Gompertz:
    """Stochastic Gompertz model.

    ``init`` is ``z0`` (positive, natural scale) for the raw form and ``w0``
    (log scale) for the linearized form.  ``beta2`` only exists when a
    covariate name is given.
    """
    entries = [("beta0", beta0, IDENTITY), ("beta1", beta1, IDENTITY)]
    if covariate is not None:
        entries.append(("beta2", beta2, IDENTITY))
    entries += [("sigma_p", sigma_p, LOG), ("sigma_o", sigma_o, LOG)]
    if form == "raw":
        entries.append(("z0", 1.0 if init is None else init, LOG))
    else:
        entries.append(("w0", 0.0 if init is None else init, IDENTITY))
    return Gompertz(_spec(entries, fixed), form=form, covariate=covariate)


# ---------------------------------------------------------------- DCRW

def t_logpdf(x, loc, scale, df):
    """Location-scale Student t log-density."""
    r = (x - loc) / scale
    return (gammaln((df + 1) / 2) - gammaln(df / 2) - 0.5 * np.log(df * np.pi)
            - np.log(scale) - (df + 1) / 2 * np.log1p(r * r / df))


@dataclass(frozen=True)
class DcrwErrorTable:
    """Per-quality-class t-distribution scales and degrees of freedom.

    ``scale[q] = (s_lon, s_lat)`` and ``df[q] = (df_lon, df_lat)``.
    """

    scale: Mapping[int, tuple]
    df: Mapping[int, tuple]
    authoritative: bool = True

    def __post_init__(self):
        if set(self.scale) != set(self.df):
            raise ConfigurationError("error table scale and df must cover the same classes")
        for q in self.scale:
            s, d = self.scale[q], self.df[q]
            if len(s) != 2 or len(d) != 2:
                raise ConfigurationError("each class needs (lon, lat) scale and df")
            if min(s) <= 0 or min(d) <= 0:
                raise ConfigurationError(f"class {q}: scales and df must be positive")

    @property
    def classes(self):
        return tuple(sorted(self.scale))

    @classmethod
    def single(cls, scale=1.0, df=5.0) -> "DcrwErrorTable":
        return cls({1: (scale, scale)}, {1: (df, df)})

    @classmethod
    def from_dict(cls, d: Mapping) -> "DcrwErrorTable":
        scale = {int(q): tuple(float(x) for x in v) for q, v in d["scale"].items()}
        df = {int(q): tuple(float(x) for x in v) for q, v in d["df"].items()}
        return cls(scale, df, bool(d.get("authoritative", True)))

    def to_dict(self) -> dict:
        return {"scale": {str(q): list(v) for q, v in self.scale.items()},
                "df": {str(q): list(v) for q, v in self.df.items()},
                "authoritative": self.authoritative}


#: Illustrative table for quality classes 1..6.  NOT derived from field data;
#: real analyses must supply measured values.
PLACEHOLDER_ERROR_TABLE = DcrwErrorTable(
    scale={1: (0.3, 0.3), 2: (0.5, 0.5), 3: (1.0, 1.0), 4: (2.0, 2.0), 5: (3.0, 3.0), 6: (5.0, 5.0)},
    df={1: (10.0, 10.0), 2: (8.0, 8.0), 3: (6.0, 6.0), 4: (4.0, 4.0), 5: (3.0, 3.0), 6: (2.0, 2.0)},
    authoritative=False,
)


@dataclass(frozen=True)
class InterpolationIndex:
    """Regular-grid interval ``step`` (1-based) and fraction ``frac`` per record."""

    step: np.ndarray
    frac: np.ndarray
    n_steps: int


def interpolation_index(times, grid_interval: float, tau0: float | None = None) -> InterpolationIndex:
    """Map observation times onto a regular grid ``tau_k = tau0 + k h``.

    Record ``i`` falls in interval ``(tau_{k-1}, tau_k]`` with
    ``k = max(1, ceil((t_i - tau0)/h))`` and ``frac = (t_i - tau_{k-1})/h``.
    """
    times = np.asarray(times, dtype=float)
    if not grid_interval > 0:
        raise ConfigurationError("grid_interval must be positive")
    tau0 = float(times[0]) if tau0 is None else float(tau0)
    rel = (times - tau0) / grid_interval
    if np.any(rel < -1e-12):
        raise DataError("observations precede the grid origin")
    # guard against ceil(2.0000000001) from representation error
    step = np.maximum(1, np.ceil(rel - 1e-9).astype(int))
    frac = np.clip(rel - (step - 1), 0.0, 1.0)
    return InterpolationIndex(step=step, frac=frac, n_steps=int(step.max()))


class DCRW(ModelDefinition):
    """First-difference correlated random walk observed with t-distributed errors.

    The Markov state is the pair ``(z_t, z_{t-1})`` of regular-grid locations
    (``lon, lat, lon_prev, lat_prev``).  Observations arrive at irregular
    times and are centred on the linear interpolation between grid points.
    """

    name = "dcrw"
    state_dim = 4
    obs_dim = 2
    process_time_varying = False
    records_align_with_steps = False

    def __init__(self, spec, error_table: DcrwErrorTable, grid_interval: float):
        super().__init__(spec)
        if grid_interval is None or not grid_interval > 0:
            raise ConfigurationError("dcrw requires a positive grid_interval (no default is assumed)")
        self.error_table = error_table
        self.grid_interval = float(grid_interval)

    def check_theta(self, theta):
        super().check_theta(theta)
        g = np.asarray(theta["gamma"])
        if np.any((g < 0) | (g > 1)):
            raise DomainError("gamma must lie in [0, 1]")

    def prepare(self, data):
        if isinstance(data, StepData):
            return data
        if data.obs_dim != 2:
            raise DataError("dcrw expects two observation columns (lon, lat)")
        ii = interpolation_index(data.times, self.grid_interval)
        if data.quality is None:
            if len(self.error_table.classes) != 1:
                raise DataError("data carry no quality column but the error table has several classes")
            quality = np.full(data.T, self.error_table.classes[0])
        else:
            quality = data.quality
            bad = sorted(set(np.unique(quality)) - set(self.error_table.classes))
            if bad:
                raise DataError(f"quality class(es) {bad} absent from the error table")
        K = ii.n_steps
        counts = np.bincount(ii.step - 1, minlength=K)
        m = max(1, int(counts.max()))
        Y = np.full((K, m, 2), np.nan)
        J = np.zeros((K, m))
        S = np.ones((K, m, 2))
        D = np.full((K, m, 2), 5.0)
        slot = np.zeros(data.T, dtype=int)
        fill = np.zeros(K, dtype=int)
        for i in range(data.T):
            k = ii.step[i] - 1
            slot[i] = fill[k]
            fill[k] += 1
            Y[k, slot[i]] = data.y[i]
            J[k, slot[i]] = ii.frac[i]
            S[k, slot[i]] = self.error_table.scale[int(quality[i])]
            D[k, slot[i]] = self.error_table.df[int(quality[i])]
        grid_times = data.times[0] + self.grid_interval * np.arange(1, K + 1)
        extra = {"J": J, "S": S, "D": D, "Y": Y, "record_step": ii.step - 1, "record_slot": slot}
        return StepData(data=data, times=grid_times, dt=np.full(K, self.grid_interval),
                        y=Y.reshape(K, 2 * m), extra=extra)

    def _cov(self, theta):
        sl, sa, r = theta["sigma_lon"], theta["sigma_lat"], theta["rho"]
        return sl, sa, r

    def initial_state(self, theta):
        x = np.array(np.broadcast_arrays(theta["x0_lon"], theta["x0_lat"]), dtype=float)
        v = np.array(np.broadcast_arrays(theta["v0_lon"], theta["v0_lat"]), dtype=float)
        return InitialState(np.concatenate([x, x - v]), np.zeros((4, 4)), True)

    def _mean(self, z_prev, theta):
        g = np.asarray(theta["gamma"])[..., None] if np.ndim(theta["gamma"]) else theta["gamma"]
        cur, prev = z_prev[..., :2], z_prev[..., 2:]
        return cur + g * (cur - prev)

    def process_sample(self, sd, idx, z_prev, theta, rng):
        sl, sa, r = self._cov(theta)
        n = z_prev.shape[0]
        e1 = rng.standard_normal(n)
        e2 = rng.standard_normal(n)
        eps = np.stack([sl * e1, sa * (r * e1 + np.sqrt(1 - np.asarray(r) ** 2) * e2)], axis=-1)
        new = self._mean(z_prev, theta) + eps
        return np.concatenate([new, z_prev[..., :2]], axis=-1)

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        return self._bvn_logpdf(z[..., :2] - self._mean(z_prev, theta), theta)

    def _bvn_logpdf(self, e, theta):
        sl, sa, r = self._cov(theta)
        a, b = e[..., 0] / sl, e[..., 1] / sa
        one_r2 = 1.0 - np.asarray(r) ** 2
        q = (a * a - 2 * r * a * b + b * b) / one_r2
        return -LOG_2PI - np.log(sl) - np.log(sa) - 0.5 * np.log(one_r2) - 0.5 * q

    def process_noise(self, sd, idx, z, z_prev, theta):
        e = z[..., :2] - self._mean(z_prev, theta)
        return e, np.array([theta["sigma_lon"], theta["sigma_lat"]])

    def _obs_terms(self, sd, idx, z, theta):
        Y, J = sd.extra["Y"][idx], sd.extra["J"][idx]
        psi = np.stack(np.broadcast_arrays(theta["psi_lon"], theta["psi_lat"]), axis=-1).astype(float)
        if psi.ndim == 2:  # one parameter value per particle
            psi = psi[:, None, :]
        scale = sd.extra["S"][idx] * psi
        df = sd.extra["D"][idx]
        cur, prev = z[..., None, :2], z[..., None, 2:]
        centre = (1.0 - J[..., None]) * prev + J[..., None] * cur
        return Y, centre, scale, df

    def obs_logpdf(self, sd, idx, z, theta):
        Y, centre, scale, df = self._obs_terms(sd, idx, z, theta)
        lp = _masked(Y, t_logpdf(np.nan_to_num(Y), centre, scale, df))
        return lp.sum(axis=(-1, -2))

    def obs_sample(self, sd, idx, z, theta, rng):
        Y, centre, scale, df = self._obs_terms(sd, idx, z, theta)
        draw = centre + scale * rng.standard_t(np.broadcast_to(df, centre.shape))
        return draw.reshape(draw.shape[:-2] + (-1,))

    def simulate(self, template, theta, rng, missing=None):
        sd = self.prepare(template)
        z = self.sample_initial(theta, 1, rng)
        states = np.empty((sd.T, 4))
        for t in range(sd.T):
            z = self.process_sample(sd, t, z, theta, rng)
            states[t] = z[0]
        padded = self.obs_sample(sd, np.arange(sd.T), states, theta, rng).reshape(sd.T, -1, 2)
        y = padded[sd.extra["record_step"], sd.extra["record_slot"]]
        if missing is not None:
            y = np.where(missing, np.nan, y)
        return states, template.with_y(y)

    def laplace_problem(self, sd, theta):
        """Order-2 representation over 2-d location blocks."""
        init = self.initial_state(theta).mean
        prefix = np.stack([init[2:], init[:2]])  # z_{-1}, z_0

        def term(i, W):
            z_prev = np.concatenate([W[:, 1], W[:, 0]], axis=-1)
            z = np.concatenate([W[:, 2], W[:, 1]], axis=-1)
            return self.process_logpdf(sd, i, z, z_prev, theta) + self.obs_logpdf(sd, i, z, theta)

        x_init = _dcrw_init(sd, init[:2])

        def to_states(X):
            prev = np.vstack([init[:2], X[:-1]])
            return np.concatenate([X, prev], axis=1)

        return LaplaceProblem(block_dim=2, order=2, n_blocks=sd.T, prefix=prefix, term=term,
                              init=x_init, to_states=to_states)


def _dcrw_init(sd, start):
    Y, J = sd.extra["Y"], sd.extra["J"]
    out = np.empty((sd.T, 2))
    last = np.asarray(start, dtype=float)
    for k in range(sd.T):
        obs = Y[k][np.all(np.isfinite(Y[k]), axis=1)]
        if obs.size:
            last = obs.mean(axis=0)
        out[k] = last
    return out


def make_dcrw(gamma=0.5, sigma_lon=1.0, sigma_lat=1.0, rho=0.0, *, error_table: DcrwErrorTable | None = None,
              grid_interval: float | None = None, psi_lon=1.0, psi_lat=1.0, x0=(0.0, 0.0), v0=(0.0, 0.0),
              fixed: Sequence[str] = ("rho", "psi_lon", "psi_lat", "x0_lon", "x0_lat", "v0_lon", "v0_lat")) -> DCRW:
    """Correlated random walk on a regular grid with irregular t-distributed fixes."""
    if not 0 <= gamma <= 1:
        raise DomainError("gamma must lie in [0, 1]")
    if error_table is None:
        raise ConfigurationError("dcrw requires an error table (scale and df per quality class)")
    fixed = set(fixed)
    if gamma in (0.0, 1.0):
        fixed.add("gamma")  # boundary values sit outside the logit support
    spec = _spec([
        ("gamma", gamma, UNIT), ("sigma_lon", sigma_lon, LOG), ("sigma_lat", sigma_lat, LOG),
        ("rho", rho, Transform("logit", -1.0, 1.0)), ("psi_lon", psi_lon, LOG), ("psi_lat", psi_lat, LOG),
        ("x0_lon", x0[0], IDENTITY), ("x0_lat", x0[1], IDENTITY),
        ("v0_lon", v0[0], IDENTITY), ("v0_lat", v0[1], IDENTITY),
    ], fixed)
    return DCRW(spec, error_table, grid_interval)


# ---------------------------------------------------------------- OU-CRW

def _integrated_ou_factor(x):
    """``x - 2(1 - e^-x) + (1 - e^-2x)/2`` without cancellation for small ``x``."""
    x = np.asarray(x, dtype=float)
    series = x ** 3 / 3 - x ** 4 / 4 + 7 * x ** 5 / 60 - x ** 6 / 24
    direct = x + 2 * np.expm1(-x) - 0.5 * np.expm1(-2 * x)
    return np.where(x < 1e-3, series, direct)


def oucrw_transition(delta, beta, sigma, location_variance: str = "exact"):
    """Transition matrix and noise covariance of the OU velocity model over ``delta``.

    Velocity follows an Ornstein-Uhlenbeck process with rate ``beta`` and
    scale ``sigma``; location integrates velocity.  ``location_variance``
    selects the location-noise variance: ``"exact"`` integrates the velocity
    process, ``"constant"`` uses the time-invariant value ``sigma^2/beta^2``
    (not positive semidefinite in general).  Arrays of ``delta`` give stacked
    ``(..., 2, 2)`` results.
    """
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise DomainError("time increments must be positive")
    if not beta > 0 or not sigma > 0:
        raise DomainError("beta and sigma must be positive")
    x = beta * delta
    e1 = np.exp(-x)
    s2 = sigma * sigma
    F = np.zeros(delta.shape + (2, 2))
    F[..., 0, 0] = 1.0
    F[..., 0, 1] = -np.expm1(-x) / beta
    F[..., 1, 1] = e1
    Q = np.zeros(delta.shape + (2, 2))
    Q[..., 1, 1] = -s2 * np.expm1(-2 * x) / (2 * beta)
    Q[..., 0, 1] = Q[..., 1, 0] = s2 / (2 * beta ** 2) * np.expm1(-x) ** 2
    if location_variance == "exact":
        Q[..., 0, 0] = s2 / beta ** 3 * _integrated_ou_factor(x)
    elif location_variance == "constant":
        Q[..., 0, 0] = s2 / beta ** 2
    else:
        raise ConfigurationError("location_variance must be 'exact' or 'constant'")
    return F, Q


class OUCRW(ModelDefinition):
    """One coordinate of a continuous-time correlated random walk.

    State ``(location, velocity)``; ``y_i = location_i + N(0, sigma_o^2)``.
    """

    name = "oucrw"
    state_dim = 2
    obs_dim = 1
    vectorized_theta = False

    def __init__(self, spec, location_variance="exact"):
        super().__init__(spec)
        if location_variance not in ("exact", "constant"):
            raise ConfigurationError("location_variance must be 'exact' or 'constant'")
        self.location_variance = location_variance
        self._cache = None

    def prepare(self, data):
        sd = super().prepare(data)
        if not isinstance(data, StepData):
            self.process_time_varying = bool(np.ptp(sd.dt) > 1e-12 * np.abs(sd.dt).max())
        return sd

    def initial_state(self, theta):
        return InitialState(np.array([theta["x0"], theta["v0"]], dtype=float), np.zeros((2, 2)), True)

    def _FQ(self, sd, theta):
        key = (id(sd), theta["beta"], theta["sigma"])
        if self._cache is None or self._cache[0] != key:
            F, Q = oucrw_transition(sd.dt, theta["beta"], theta["sigma"], self.location_variance)
            L = np.stack([_chol_psd(q) for q in Q])
            Qinv_logdet = [_inv_logdet(q) for q in Q]
            self._cache = (key, F, Q, L, Qinv_logdet)
        return self._cache[1:]

    def linear_gaussian(self, sd, theta):
        F, Q, _, _ = self._FQ(sd, theta)
        T = sd.T
        return LGCoefficients(
            F=F.copy(), c=np.zeros((T, 2)), Q=Q.copy(),
            H=np.tile([[[1.0, 0.0]]], (T, 1, 1)), d=np.zeros((T, 1)),
            R=np.full((T, 1, 1), theta["sigma_o"] ** 2),
            m0=np.array([theta["x0"], theta["v0"]], dtype=float), P0=np.zeros((2, 2)),
        )

    def process_sample(self, sd, idx, z_prev, theta, rng):
        F, Q, L, _ = self._FQ(sd, theta)
        mean = np.einsum("...ij,...j->...i", F[idx], z_prev)
        e = rng.standard_normal(z_prev.shape)
        return mean + np.einsum("...ij,...j->...i", L[idx], e)

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        F, Q, _, il = self._FQ(sd, theta)
        mean = np.einsum("...ij,...j->...i", F[idx], z_prev)
        r = z - mean
        idx_arr = np.broadcast_to(np.asarray(idx), r.shape[:-1])
        Qinv = np.stack([il[i][0] for i in idx_arr.reshape(-1)]).reshape(r.shape[:-1] + (2, 2))
        logdet = np.array([il[i][1] for i in idx_arr.reshape(-1)]).reshape(r.shape[:-1])
        quad = np.einsum("...i,...ij,...j->...", r, Qinv, r)
        return -LOG_2PI - 0.5 * logdet - 0.5 * quad

    def obs_logpdf(self, sd, idx, z, theta):
        y = _obs(sd, idx)
        return _masked(y, norm_logpdf(np.nan_to_num(y), z[..., 0], theta["sigma_o"]))

    def obs_sample(self, sd, idx, z, theta, rng):
        return (z[..., 0] + theta["sigma_o"] * rng.standard_normal(z.shape[:-1]))[..., None]

    def obs_moments(self, sd, idx, z, theta):
        return z[..., :1], np.full(z.shape[:-1] + (1,), theta["sigma_o"] ** 2)

    def obs_cdf(self, sd, idx, z, y, theta):
        return ndtr((np.asarray(y)[..., 0] - z[..., 0]) / theta["sigma_o"])[..., None]

    def laplace_init(self, sd, theta):
        loc = _back_project(sd.y[:, 0], theta["x0"], False)[:, 0]
        vel = np.gradient(loc, sd.times) if sd.T > 1 else np.zeros(1)
        return np.stack([loc, vel], axis=1)


def _chol_psd(Q):
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(Q)
        if w.min() < -1e-10 * max(1.0, abs(w.max())):
            return np.full((2, 2), np.nan)
        return V * np.sqrt(np.clip(w, 0, None))


def _inv_logdet(Q):
    sign, logdet = np.linalg.slogdet(Q)
    if sign <= 0:
        return np.full((2, 2), np.nan), np.nan
    return np.linalg.inv(Q), logdet


def make_oucrw(beta=1.0, sigma=1.0, sigma_o=0.1, x0=0.0, v0=0.0, *, location_variance="exact",
               fixed: Sequence[str] = ("x0", "v0")) -> OUCRW:
    if not (beta > 0 and sigma > 0 and sigma_o > 0):
        raise DomainError("beta, sigma and sigma_o must be positive")
    spec = _spec([("beta", beta, LOG), ("sigma", sigma, LOG), ("sigma_o", sigma_o, LOG),
                  ("x0", x0, IDENTITY), ("v0", v0, IDENTITY)], fixed)
    return OUCRW(spec, location_variance=location_variance)


# ---------------------------------------------------------------- discrete-state models

@dataclass(frozen=True)
class HMMChain:
    """One independent finite-state chain scored at the given steps.

    ``init`` is the state distribution just before ``steps[0]``;
    ``trans[s]`` moves into ``steps[s]`` and ``emis[s]`` scores it.
    """

    init: np.ndarray
    trans: np.ndarray
    emis: np.ndarray
    steps: np.ndarray
    column: int = 0


class DiscreteModel(ModelDefinition):
    discrete = True
    vectorized_theta = False

    @property
    def n_states(self) -> int:
        raise NotImplementedError

    def state_values(self) -> np.ndarray:
        return np.arange(self.n_states, dtype=float)

    def hmm_chains(self, sd: StepData, theta) -> list:
        raise NotImplementedError

    def check_states(self, z):
        z = np.asarray(z)
        if not np.all(np.isin(z, self.state_values())):
            raise DomainError(f"{self.name}: state values must be in {self.state_values().tolist()}")


class CJS(DiscreteModel):
    """Cormack-Jolly-Seber capture-recapture model.

    One observation column per individual; states are 0 (dead) and 1
    (alive).  Steps up to and including first capture ``f_i`` contribute
    nothing and the state there is fixed at 1.
    """

    name = "cjs"

    def __init__(self, spec, n_individuals: int, first_capture: Sequence[int] | None = None):
        super().__init__(spec)
        self.obs_dim = self.state_dim = int(n_individuals)
        self.first_capture = None if first_capture is None else np.asarray(first_capture, dtype=int)

    @property
    def n_states(self):
        return 2

    def gamma_matrix(self, theta):
        phi = float(theta["phi"])
        return np.array([[1.0, 0.0], [1.0 - phi, phi]])

    def check_theta(self, theta):
        for k in ("phi", "p"):
            if not 0.0 <= float(theta[k]) <= 1.0:
                raise DomainError(f"{k} must lie in [0, 1]")

    def prepare(self, data):
        sd = super().prepare(data)
        if isinstance(data, StepData):
            return sd
        y = sd.y
        ok = np.isnan(y) | (y == 0) | (y == 1)
        if not np.all(ok):
            raise DataError("capture histories must be 0/1 (or missing)")
        if self.first_capture is not None:
            f = self.first_capture
            if f.size != y.shape[1] or np.any((f < 0) | (f >= sd.T)):
                raise DataError("first_capture needs one valid step index per individual")
        else:
            seen = y == 1
            if not np.all(seen.any(axis=0)):
                raise DataError("every individual needs at least one capture (or an explicit first_capture)")
            f = seen.argmax(axis=0)
        return replace(sd, extra={"first": f})

    def initial_state(self, theta):
        return InitialState(np.ones(self.state_dim), np.zeros((self.state_dim,) * 2), True)

    def _emission(self, y, p):
        e = np.ones(y.shape + (2,))
        e[y == 1] = [0.0, p]
        e[y == 0] = [1.0, 1.0 - p]
        return e

    def hmm_chains(self, sd, theta):
        G = self.gamma_matrix(theta)
        p = float(theta["p"])
        chains = []
        for i, f in enumerate(sd.extra["first"]):
            steps = np.arange(f + 1, sd.T)
            if steps.size == 0:
                continue
            trans = np.broadcast_to(G, (steps.size, 2, 2)).copy()
            chains.append(HMMChain(np.array([0.0, 1.0]), trans, self._emission(sd.y[steps, i], p), steps, i))
        return chains

    def _active(self, sd, idx):
        return np.asarray(idx)[..., None] > sd.extra["first"]

    def process_sample(self, sd, idx, z_prev, theta, rng):
        alive = rng.random(z_prev.shape) < theta["phi"] * z_prev
        return np.where(self._active(sd, idx), alive.astype(float), 1.0)

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        self.check_states(z)
        pr = theta["phi"] * z_prev
        with np.errstate(divide="ignore"):
            lp = np.where(z == 1, np.log(pr), np.log1p(-pr))
        return np.where(self._active(sd, idx), lp, 0.0).sum(axis=-1)

    def obs_logpdf(self, sd, idx, z, theta):
        self.check_states(z)
        y = sd.y[idx]
        pr = theta["p"] * z
        with np.errstate(divide="ignore"):
            lp = np.where(y == 1, np.log(pr), np.log1p(-pr))
        lp = np.where(np.isnan(y), 0.0, lp)
        return np.where(self._active(sd, idx), lp, 0.0).sum(axis=-1)

    def obs_sample(self, sd, idx, z, theta, rng):
        y = (rng.random(z.shape) < theta["p"] * z).astype(float)
        first = sd.extra["first"]
        return np.where(np.asarray(idx)[..., None] == first, 1.0, np.where(self._active(sd, idx), y, 0.0))

    def simulate(self, template, theta, rng, missing=None):
        if self.first_capture is None:
            raise ConfigurationError("simulating capture histories requires first_capture")
        y0 = np.zeros((template.T, self.obs_dim))
        y0[self.first_capture, np.arange(self.obs_dim)] = 1.0
        return super().simulate(template.with_y(y0), theta, rng, missing)


def make_cjs(phi=0.8, p=0.5, *, n_individuals: int = 1, first_capture: Sequence[int] | None = None,
             fixed: Sequence[str] = ()) -> CJS:
    if not (0 <= phi <= 1 and 0 <= p <= 1):
        raise DomainError("phi and p must lie in [0, 1]")
    fixed = set(fixed) | {n for n, v in (("phi", phi), ("p", p)) if v in (0.0, 1.0)}
    spec = _spec([("phi", phi, UNIT), ("p", p, UNIT)], fixed)
    if first_capture is not None:
        n_individuals = len(first_capture)
    return CJS(spec, n_individuals, first_capture)


class CategoricalHMM(DiscreteModel):
    """Parameter-free HMM with categorical emissions (used as a test bed).

    ``z_1 ~ init``, ``z_t | z_{t-1} ~ trans[z_{t-1}]``, ``y_t | z_t ~ emis[z_t]``
    with observation categories ``0..M-1``.
    """

    name = "categorical_hmm"
    state_dim = 1
    obs_dim = 1

    def __init__(self, init, trans, emis):
        super().__init__(ParameterSpec((), (), (), ()))
        self.init = np.asarray(init, dtype=float)
        self.trans = np.asarray(trans, dtype=float)
        self.emis = np.asarray(emis, dtype=float)
        K = self.init.size
        if self.trans.shape != (K, K) or self.emis.shape[0] != K:
            raise ConfigurationError("inconsistent HMM dimensions")
        for name, m in (("init", self.init[None]), ("trans", self.trans), ("emis", self.emis)):
            if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0):
                raise ConfigurationError(f"{name} rows must be probability vectors")

    @property
    def n_states(self):
        return self.init.size

    def initial_state(self, theta):
        return InitialState(np.full(1, np.nan), np.zeros((1, 1)), True)

    def _emis(self, sd, steps):
        y = sd.y[steps, 0]
        out = np.ones((steps.size, self.n_states))
        obs = ~np.isnan(y)
        out[obs] = self.emis[:, y[obs].astype(int)].T
        return out

    def hmm_chains(self, sd, theta):
        steps = np.arange(sd.T)
        trans = np.broadcast_to(self.trans, (sd.T, self.n_states, self.n_states)).copy()
        trans[0] = np.broadcast_to(self.init, (self.n_states, self.n_states))
        # any distribution before step 0 maps onto init through trans[0]
        start = np.full(self.n_states, 1.0 / self.n_states)
        return [HMMChain(start, trans, self._emis(sd, steps), steps, 0)]

    def process_logpdf(self, sd, idx, z, z_prev, theta):
        z = z[..., 0].astype(int)
        idx = np.broadcast_to(np.asarray(idx), z.shape)
        zp = np.nan_to_num(z_prev[..., 0]).astype(int)
        with np.errstate(divide="ignore"):
            return np.where(idx == 0, np.log(self.init[z]), np.log(self.trans[zp, z]))

    def obs_logpdf(self, sd, idx, z, theta):
        y = sd.y[idx, 0]
        zi = z[..., 0].astype(int)
        with np.errstate(divide="ignore"):
            lp = np.log(self.emis[zi, np.nan_to_num(y).astype(int)])
        return np.where(np.isnan(y), 0.0, lp)

    def process_sample(self, sd, idx, z_prev, theta, rng):
        n = z_prev.shape[0]
        probs = self.init[None].repeat(n, 0) if idx == 0 else self.trans[z_prev[:, 0].astype(int)]
        u = rng.random((n, 1))
        return (u > probs.cumsum(axis=1)).sum(axis=1, keepdims=True).astype(float)

    def obs_sample(self, sd, idx, z, theta, rng):
        probs = self.emis[z[..., 0].astype(int)]
        u = rng.random(probs.shape[:-1] + (1,))
        return (u > probs.cumsum(axis=-1)).sum(axis=-1, keepdims=True).astype(float)


# ---------------------------------------------------------------- registry

def build_model(config: Mapping) -> ModelDefinition:
    """Model from a ``{"model", "params", "fixed", "options"}`` mapping."""
    if "model" not in config:
        raise ConfigurationError("model configuration needs a 'model' entry")
    name = config["model"]
    params = dict(config.get("params", {}))
    options = dict(config.get("options", {}))
    fixed = config.get("fixed")
    kw = dict(params)
    if fixed is not None:
        kw["fixed"] = list(fixed)
    try:
        if name == "ndlm":
            return make_ndlm(initial_sd=options.get("initial_sd", 0.0), **kw)
        if name == "product_ndlm":
            return make_product_ndlm(**kw)
        if name == "logistic":
            return make_logistic(scale=options.get("scale", "natural"), **kw)
        if name == "gompertz":
            form = options.get("form", "linearized")
            init = kw.pop("z0", None) if form == "raw" else kw.pop("w0", None)
            return make_gompertz(init=init, form=form, covariate=options.get("covariate"), **kw)
        if name == "dcrw":
            table = options.get("error_table")
            if table is None or table == "placeholder":
                table = PLACEHOLDER_ERROR_TABLE
            else:
                table = DcrwErrorTable.from_dict(table)
            for c in ("x0", "v0"):
                if f"{c}_lon" in kw or f"{c}_lat" in kw:
                    kw[c] = (kw.pop(f"{c}_lon", 0.0), kw.pop(f"{c}_lat", 0.0))
            return make_dcrw(error_table=table, grid_interval=options.get("grid_interval"), **kw)
        if name == "oucrw":
            return make_oucrw(location_variance=options.get("location_variance", "exact"), **kw)
        if name == "cjs":
            return make_cjs(first_capture=options.get("first_capture"),
                            n_individuals=options.get("n_individuals", 1), **kw)
    except TypeError as exc:
        raise ConfigurationError(f"invalid parameters for model {name!r}: {exc}") from None
    raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(MODEL_NAMES)}")


MODEL_NAMES = ("ndlm", "product_ndlm", "logistic", "gompertz", "dcrw", "oucrw", "cjs")
