"""Data containers, parameter transforms, the model contract and simulation."""
from __future__ import annotations

import copy
import csv
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

from ssmlab.errors import ConfigurationError, DataError, DomainError

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_QUALITY_LEVELS = (1, 2, 3, 4, 5, 6)


# ---------------------------------------------------------------- randomness

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *keys)``.

    Streams depend only on the key path, never on execution order, which is
    what makes parallel runs reproducible regardless of worker count.
    """
    if seed is None:
        raise ConfigurationError("a seed is required for stochastic operations")
    entropy = [int(seed)] + [int(k) for k in keys]
    if any(e < 0 for e in entropy):
        raise ConfigurationError("seeds and stream keys must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**62))


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map, in worker processes when ``workers > 1``."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def norm_logpdf(x, mu, sd):
    """Normal log-density that treats ``sd == 0`` as a point mass (log mass 0)."""
    x = np.asarray(x, dtype=float)
    sd = np.asarray(sd, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (x - mu) / sd
        out = -0.5 * r * r - np.log(sd) - 0.5 * LOG_2PI
    if np.any(sd == 0):
        out = np.where(sd == 0, np.where(x == mu, 0.0, -np.inf), out)
    return out


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class Transform:
    """Bijection from a parameter's natural support to the real line."""

    kind: str = "identity"
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "log", "logit"):
            raise ConfigurationError(f"unknown transform {self.kind!r}")
        if self.kind == "logit" and not self.lower < self.upper:
            raise ConfigurationError("logit transform needs lower < upper")

    def in_support(self, v) -> bool:
        v = np.asarray(v, dtype=float)
        if not np.all(np.isfinite(v)):
            return False
        if self.kind == "log":
            return bool(np.all(v > 0))
        if self.kind == "logit":
            return bool(np.all((v > self.lower) & (v < self.upper)))
        return True

    def forward(self, v):
        if self.kind == "log":
            return np.log(v)
        if self.kind == "logit":
            return np.log(v - self.lower) - np.log(self.upper - v)
        return v

    def inverse(self, x):
        if self.kind == "log":
            return np.exp(x)
        if self.kind == "logit":
            return self.lower + (self.upper - self.lower) * expit(x)
        return x

    def log_jacobian(self, x):
        """log |d natural / d unconstrained| at ``x``."""
        if self.kind == "log":
            return x
        if self.kind == "logit":
            return math.log(self.upper - self.lower) + log_expit(x) + log_expit(-x)
        return np.zeros_like(np.asarray(x, dtype=float))

    def derivative(self, x):
        return np.exp(self.log_jacobian(x))

    def to_dict(self) -> dict:
        if self.kind == "logit":
            return {"kind": "logit", "lower": self.lower, "upper": self.upper}
        return {"kind": self.kind}


IDENTITY = Transform("identity")
LOG = Transform("log")
UNIT = Transform("logit", 0.0, 1.0)


@dataclass(frozen=True)
class ParameterSpec:
    """Ordered parameters with transforms, default values and a fixed mask.

    ``values`` double as defaults and as the values of fixed parameters.
    """

    names: tuple
    transforms: tuple
    values: tuple
    fixed: tuple

    def __post_init__(self):
        n = len(self.names)
        if len(set(self.names)) != n:
            raise ConfigurationError("parameter names must be unique")
        if not (len(self.transforms) == len(self.values) == len(self.fixed) == n):
            raise ConfigurationError("parameter spec fields differ in length")

    @classmethod
    def build(cls, entries: Sequence[tuple], fixed: Sequence[str] = ()) -> "ParameterSpec":
        """From ``(name, value, transform)`` triples."""
        names = tuple(e[0] for e in entries)
        unknown = set(fixed) - set(names)
        if unknown:
            raise ConfigurationError(f"unknown parameter(s) to fix: {sorted(unknown)}")
        return cls(
            names=names,
            transforms=tuple(e[2] for e in entries),
            values=tuple(float(e[1]) for e in entries),
            fixed=tuple(n in fixed for n in names),
        )

    @property
    def free_names(self) -> tuple:
        return tuple(n for n, f in zip(self.names, self.fixed) if not f)

    @property
    def n_free(self) -> int:
        return sum(not f for f in self.fixed)

    def transform_of(self, name: str) -> Transform:
        return self.transforms[self.names.index(name)]

    def theta(self) -> dict:
        return dict(zip(self.names, self.values))

    def complete(self, theta: Mapping | None) -> dict:
        """Defaults overlaid with ``theta``; unknown names are an error."""
        out = self.theta()
        if theta:
            unknown = set(theta) - set(self.names)
            if unknown:
                raise ConfigurationError(f"unknown parameter(s): {sorted(unknown)}")
            out.update(theta)
        return out

    def with_values(self, theta: Mapping) -> "ParameterSpec":
        full = self.complete(theta)
        return replace(self, values=tuple(float(full[n]) for n in self.names))

    def with_fixed(self, names: Sequence[str], fixed: bool = True) -> "ParameterSpec":
        unknown = set(names) - set(self.names)
        if unknown:
            raise ConfigurationError(f"unknown parameter(s): {sorted(unknown)}")
        mask = tuple((fixed if n in names else f) for n, f in zip(self.names, self.fixed))
        return replace(self, fixed=mask)

    def validate(self, theta: Mapping) -> None:
        """Support check for free parameters (fixed ones may sit on a boundary)."""
        for name, tr, fx in zip(self.names, self.transforms, self.fixed):
            if not fx and name in theta and not tr.in_support(theta[name]):
                raise DomainError(f"parameter {name}={theta[name]!r} outside its support ({tr.kind})")

    def to_unconstrained(self, theta: Mapping) -> np.ndarray:
        theta = self.complete(theta)
        out = []
        for name, tr, fx in zip(self.names, self.transforms, self.fixed):
            if fx:
                continue
            v = theta[name]
            if not tr.in_support(v):
                raise DomainError(f"parameter {name}={v!r} outside its support ({tr.kind})")
            out.append(float(tr.forward(float(v))))
        return np.array(out, dtype=float)

    def from_unconstrained(self, x) -> dict:
        """Natural-scale values; ``x`` may be ``(k,)`` or a swarm ``(n, k)``."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DomainError("unconstrained vector contains non-finite values")
        if x.shape[-1] != self.n_free:
            raise DomainError(f"expected {self.n_free} free values, got {x.shape[-1]}")
        theta = self.theta()
        j = 0
        for name, tr, fx in zip(self.names, self.transforms, self.fixed):
            if fx:
                continue
            v = tr.inverse(x[..., j])
            theta[name] = float(v) if x.ndim == 1 else v
            j += 1
        return theta

    def log_jacobian(self, x) -> float:
        x = np.asarray(x, dtype=float)
        tot = 0.0
        j = 0
        for tr, fx in zip(self.transforms, self.fixed):
            if fx:
                continue
            tot = tot + tr.log_jacobian(x[..., j])
            j += 1
        return tot

    def jacobian_diag(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        trs = [tr for tr, fx in zip(self.transforms, self.fixed) if not fx]
        return np.array([float(tr.derivative(xi)) for tr, xi in zip(trs, x)])


def to_unconstrained(spec: ParameterSpec, theta: Mapping) -> np.ndarray:
    return spec.to_unconstrained(theta)


def from_unconstrained(spec: ParameterSpec, x) -> dict:
    return spec.from_unconstrained(x)


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class TimeSeriesData:
    """Observation times, observation records (NaN = missing), covariates.

    ``y`` has shape ``(T, p)``; each coordinate may be missing on its own.
    ``quality`` holds an optional integer class label per record.
    """

    times: np.ndarray
    y: np.ndarray
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict)
    quality: np.ndarray | None = None
    quality_levels: tuple = DEFAULT_QUALITY_LEVELS
    t0: float | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        if times.size < 1:
            raise DataError("a time series needs at least one time point")
        if not np.all(np.isfinite(times)):
            raise DataError("times must be finite")
        if np.any(np.diff(times) <= 0):
            raise DataError("times must be strictly increasing")
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[0] != times.size:
            raise DataError(f"observations must have shape (T, p) with T={times.size}, got {y.shape}")
        covs = {}
        for name, values in dict(self.covariates).items():
            v = np.asarray(values, dtype=float).reshape(-1)
            if v.size != times.size:
                raise DataError(f"covariate {name!r} has {v.size} values for {times.size} times")
            if not np.all(np.isfinite(v)):
                raise DataError(f"covariate {name!r} has missing values; missing covariates are not supported")
            covs[name] = v
        quality = self.quality
        if quality is not None:
            quality = np.asarray(quality).reshape(-1).astype(int)
            if quality.size != times.size:
                raise DataError("quality needs one label per record")
            bad = set(np.unique(quality)) - set(self.quality_levels)
            if bad:
                raise DataError(f"quality labels {sorted(bad)} not in declared set {self.quality_levels}")
        if self.t0 is not None and not self.t0 < times[0]:
            raise DataError("t0 must precede the first observation time")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "quality", quality)

    @classmethod
    def empty(cls, times, obs_dim: int = 1, **kw) -> "TimeSeriesData":
        times = np.asarray(times, dtype=float).reshape(-1)
        return cls(times=times, y=np.full((times.size, obs_dim), np.nan), **kw)

    @property
    def T(self) -> int:
        return self.times.size

    @property
    def obs_dim(self) -> int:
        return self.y.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.y)

    def with_y(self, y) -> "TimeSeriesData":
        return replace(self, y=np.asarray(y, dtype=float).reshape(self.y.shape))

    def head(self, n: int) -> "TimeSeriesData":
        """The first ``n`` records."""
        if not 1 <= n <= self.T:
            raise DataError(f"cannot take {n} of {self.T} records")
        return replace(
            self,
            times=self.times[:n],
            y=self.y[:n],
            covariates={k: v[:n] for k, v in self.covariates.items()},
            quality=None if self.quality is None else self.quality[:n],
        )

    def mask_steps(self, steps) -> "TimeSeriesData":
        """Copy with every coordinate of the given records set missing."""
        y = self.y.copy()
        y[np.asarray(steps, dtype=int)] = np.nan
        return replace(self, y=y)

    def start_time(self) -> float:
        """Time of the initial state ``z_0``."""
        if self.t0 is not None:
            return float(self.t0)
        step = self.times[1] - self.times[0] if self.T > 1 else 1.0
        return float(self.times[0] - step)


_Y_COL = re.compile(r"^y(\d+)$")
_NA = {"", "NA", "na", "NaN", "nan"}


def read_csv(path, quality_levels: Sequence[int] = DEFAULT_QUALITY_LEVELS) -> TimeSeriesData:
    """Load ``time, y1[, y2, ...][, quality][, covariates...]`` records.

    Empty fields and ``NA`` mark missing observations.  Missing covariates
    or times are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if "time" not in header:
        raise DataError(f"{path}: header must contain a 'time' column")
    y_cols = sorted((int(m.group(1)), i) for i, h in enumerate(header) if (m := _Y_COL.match(h)))
    if not y_cols:
        raise DataError(f"{path}: header must contain observation columns y1, y2, ...")
    t_idx = header.index("time")
    q_idx = header.index("quality") if "quality" in header else None
    cov_idx = {h: i for i, h in enumerate(header)
               if i != t_idx and i != q_idx and not _Y_COL.match(h)}

    def num(cell, lineno, col, allow_missing):
        cell = cell.strip()
        if cell in _NA:
            if allow_missing:
                return math.nan
            raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
        try:
            return float(cell)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value {cell!r} in column {col!r}") from None

    times, ys, qs = [], [], []
    covs = {h: [] for h in cov_idx}
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        times.append(num(row[t_idx], lineno, "time", False))
        ys.append([num(row[i], lineno, header[i], True) for _, i in y_cols])
        if q_idx is not None:
            qs.append(int(num(row[q_idx], lineno, "quality", False)))
        for h, i in cov_idx.items():
            covs[h].append(num(row[i], lineno, h, False))
    if not times:
        raise DataError(f"{path}: no data rows")
    return TimeSeriesData(
        times=np.array(times),
        y=np.array(ys),
        covariates={h: np.array(v) for h, v in covs.items()},
        quality=np.array(qs) if q_idx is not None else None,
        quality_levels=tuple(quality_levels),
    )


def format_float(v) -> str:
    v = float(v)
    return "NA" if math.isnan(v) else repr(v)


def write_csv(data: TimeSeriesData, path) -> None:
    """Write ``data`` so that :func:`read_csv` recovers it exactly."""
    header = ["time"] + [f"y{j + 1}" for j in range(data.obs_dim)]
    if data.quality is not None:
        header.append("quality")
    header += list(data.covariates)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(data.T):
            row = [format_float(data.times[t])] + [format_float(v) for v in data.y[t]]
            if data.quality is not None:
                row.append(str(int(data.quality[t])))
            row += [format_float(v[t]) for v in data.covariates.values()]
            w.writerow(row)


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------- model contract

@dataclass(frozen=True)
class StepData:
    """A dataset bound to a model's time steps."""

    data: TimeSeriesData
    times: np.ndarray
    dt: np.ndarray
    y: np.ndarray
    extra: Mapping[str, Any] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class InitialState:
    mean: np.ndarray
    cov: np.ndarray
    fixed: bool


@dataclass(frozen=True)
class LGCoefficients:
    """Time-indexed linear-Gaussian system matrices.

    ``z_t = F_t z_{t-1} + c_t + N(0, Q_t)``, ``y_t = H_t z_t + d_t + N(0, R_t)``.
    """

    F: np.ndarray   # (T, d, d)
    c: np.ndarray   # (T, d)
    Q: np.ndarray   # (T, d, d)
    H: np.ndarray   # (T, p, d)
    d: np.ndarray   # (T, p)
    R: np.ndarray   # (T, p, p)
    m0: np.ndarray  # (d,)
    P0: np.ndarray  # (d, d)

    @classmethod
    def constant(cls, T, F, c, Q, H, d, R, m0, P0) -> "LGCoefficients":
        def tile(a, shape):
            a = np.asarray(a, dtype=float)
            return np.broadcast_to(a, (T,) + shape).copy()
        F = np.atleast_2d(F) if np.ndim(F) < 3 else F
        dim = np.shape(F)[-1]
        H = np.asarray(H, dtype=float)
        H = H.reshape(-1, dim) if H.ndim < 3 else H
        p = H.shape[-2]
        return cls(
            F=tile(F, (dim, dim)), c=tile(c, (dim,)), Q=tile(Q, (dim, dim)),
            H=tile(H, (p, dim)), d=tile(d, (p,)), R=tile(R, (p, p)),
            m0=np.asarray(m0, dtype=float).reshape(dim),
            P0=np.asarray(P0, dtype=float).reshape(dim, dim),
        )


class ModelDefinition:
    """Base class for state-space models.

    Subclasses implement the process and observation densities and samplers.
    Every density/sampler is vectorized: ``idx`` is a step index (0-based) or
    an integer array aligned with the leading axis of ``z``; ``z`` has trailing
    axis ``state_dim``.  Parameter values in ``theta`` may be scalars or arrays
    broadcasting against the leading axis (used by iterated filtering).
    """

    name = "model"
    state_dim = 1
    obs_dim = 1
    discrete = False
    #: process density differs between steps (covariates, irregular times)
    process_time_varying = False
    #: densities accept per-particle parameter arrays
    vectorized_theta = True

    def __init__(self, spec: ParameterSpec):
        self.spec = spec

    # -- parameter plumbing
    def theta(self, overrides: Mapping | None = None) -> dict:
        return self.spec.complete(overrides)

    def with_params(self, **values) -> "ModelDefinition":
        out = copy.copy(self)
        out.spec = self.spec.with_values(values)
        return out

    def with_fixed(self, names: Sequence[str], fixed: bool = True) -> "ModelDefinition":
        out = copy.copy(self)
        out.spec = self.spec.with_fixed(names, fixed)
        return out

    def check_theta(self, theta: Mapping) -> None:
        """Raise :class:`DomainError` for out-of-support parameter values."""
        self.spec.validate(theta)

    # -- data binding
    def prepare(self, data: TimeSeriesData) -> StepData:
        if isinstance(data, StepData):
            return data
        if data.obs_dim != self.obs_dim:
            raise DataError(f"{self.name} expects {self.obs_dim} observation column(s), data has {data.obs_dim}")
        times = data.times
        dt = np.diff(np.concatenate([[data.start_time()], times]))
        return StepData(data=data, times=times, dt=dt, y=data.y)

    # -- initial state
    def initial_state(self, theta: Mapping) -> InitialState:
        raise NotImplementedError

    def sample_initial(self, theta: Mapping, n: int, rng: np.random.Generator) -> np.ndarray:
        init = self.initial_state(theta)
        mean = np.asarray(init.mean, dtype=float)
        if mean.ndim == 2:  # per-particle parameter values give (d, n)
            mean = mean.T
        mean = np.broadcast_to(mean, (n, self.state_dim)).astype(float)
        if init.fixed:
            return mean.copy()
        L = _psd_sqrt(init.cov)
        return mean + rng.standard_normal((n, self.state_dim)) @ L.T

    # -- densities and samplers
    def process_sample(self, sd: StepData, idx, z_prev, theta, rng):
        raise NotImplementedError

    def process_logpdf(self, sd: StepData, idx, z, z_prev, theta):
        raise NotImplementedError

    def obs_logpdf(self, sd: StepData, idx, z, theta):
        raise NotImplementedError

    def obs_sample(self, sd: StepData, idx, z, theta, rng):
        raise NotImplementedError

    def obs_moments(self, sd: StepData, idx, z, theta):
        """Conditional mean and variance of each observation coordinate."""
        raise NotImplementedError(f"{self.name} does not provide observation moments")

    def obs_cdf(self, sd: StepData, idx, z, y, theta):
        raise NotImplementedError(f"{self.name} does not provide an observation CDF")

    def linear_gaussian(self, sd: StepData, theta) -> LGCoefficients | None:
        return None

    @property
    def has_linear_gaussian(self) -> bool:
        return type(self).linear_gaussian is not ModelDefinition.linear_gaussian

    def process_noise(self, sd: StepData, idx, z, z_prev, theta):
        """Implied process noise and its assumed standard deviation."""
        from ssmlab.errors import UnsupportedModelError
        raise UnsupportedModelError(f"{self.name}: process equation is not invertible in its noise term")

    def default_grid(self, sd: StepData, theta):
        """``(lower, upper)`` bounds for a 1-D state grid."""
        raise ConfigurationError(f"{self.name}: pass explicit grid bounds")

    def laplace_problem(self, sd: StepData, theta):
        """Custom latent representation for the Laplace backend (``None``: generic)."""
        return None

    def laplace_init(self, sd: StepData, theta) -> np.ndarray:
        """Warm start for the Laplace inner optimization (latent blocks)."""
        n = sd.T + (0 if self.initial_state(theta).fixed else 1)
        return np.zeros((n, self.state_dim))

    # -- simulation
    def simulate(self, template: TimeSeriesData, theta: Mapping, rng: np.random.Generator,
                 missing: np.ndarray | None = None):
        sd = self.prepare(template)
        z = self.sample_initial(theta, 1, rng)
        states = np.empty((sd.T, self.state_dim))
        for t in range(sd.T):
            z = self.process_sample(sd, t, z, theta, rng)
            states[t] = z[0]
        y = np.asarray(self.obs_sample(sd, np.arange(sd.T), states, theta, rng), dtype=float)
        y = y.reshape(sd.T, self.obs_dim)
        if missing is not None:
            y = np.where(missing, np.nan, y)
        return states, template.with_y(y)

    def __repr__(self):
        vals = ", ".join(f"{n}={v:g}" + ("" if f else "*") for n, v, f in
                         zip(self.spec.names, self.spec.values, self.spec.fixed))
        return f"{type(self).__name__}({vals})"


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """A matrix square root of a PSD matrix (clamping tiny negative eigenvalues)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise DomainError("covariance matrix is not positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate(model: ModelDefinition, theta: Mapping | None, times, seed: int, *,
             covariates: Mapping | None = None, quality=None, t0: float | None = None):
    """Draw states and observations from ``model``.

    ``times`` is either a sequence of observation times or a
    :class:`TimeSeriesData` whose times, covariates, quality labels and
    missing-value pattern are reused.
    """
    theta = model.theta(theta)
    model.check_theta(theta)
    rng = make_rng(seed)
    if isinstance(times, TimeSeriesData):
        template = times
        missing = template.missing
    else:
        kw = {"covariates": covariates or {}, "quality": quality, "t0": t0}
        template = TimeSeriesData.empty(times, model.obs_dim, **kw)
        missing = None
    return model.simulate(template, theta, rng, missing=missing)


def _split_states(model: ModelDefinition, theta, states, T):
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    init = model.initial_state(theta)
    if init.fixed:
        if states.shape[0] == T + 1:
            states = states[1:]
        if states.shape[0] != T:
            raise DataError(f"expected {T} states, got {states.shape[0]}")
        z0 = np.asarray(init.mean, dtype=float).reshape(1, model.state_dim)
        return z0, states, 0.0
    if states.shape[0] != T + 1:
        raise DataError(f"expected {T + 1} states including z_0, got {states.shape[0]}")
    z0 = states[:1]
    diff = z0[0] - init.mean
    cov = np.atleast_2d(init.cov)
    _, logdet = np.linalg.slogdet(2 * np.pi * cov)
    lp0 = -0.5 * (logdet + diff @ np.linalg.solve(cov, diff))
    return z0, states[1:], float(lp0)


def joint_log_terms(model: ModelDefinition, theta, states, data) -> np.ndarray:
    """Per-step ``log g(y_t|z_t) + log f(z_t|z_{t-1})`` (missing y: f only).

    A Gaussian initial density, if the model uses one, is added to step 0.
    """
    theta = model.theta(theta)
    sd = model.prepare(data)
    z0, z, lp0 = _split_states(model, theta, states, sd.T)
    z_prev = np.vstack([z0, z[:-1]])
    idx = np.arange(sd.T)
    terms = model.process_logpdf(sd, idx, z, z_prev, theta) + model.obs_logpdf(sd, idx, z, theta)
    terms = np.asarray(terms, dtype=float).copy()
    terms[0] += lp0
    return terms


def joint_log_likelihood(model: ModelDefinition, theta, states, data) -> float:
    """Joint log-likelihood of parameters and a full state trajectory."""
    return float(np.sum(joint_log_terms(model, theta, states, data)))


@dataclass(frozen=True)
class LaplaceProblem:
    """Latent blocks and windowed log-density terms for the Laplace backend.

    The latent sequence ``x_0..x_{n-1}`` (each a ``block_dim`` vector) is
    preceded by ``order`` fixed blocks ``prefix``.  Term ``i`` depends on the
    window ``x_{i-order}..x_i`` and ``term(i, windows)`` evaluates the terms
    for an index array ``i`` and windows of shape ``(len(i), order + 1, b)``.
    ``to_states`` maps the latent blocks to the model's state layout.
    """

    block_dim: int
    order: int
    n_blocks: int
    prefix: np.ndarray
    term: Callable
    init: np.ndarray
    to_states: Callable
    #: optional analytic ``(value, grad, hess)`` over flattened windows
    derivs: Callable | None = None
