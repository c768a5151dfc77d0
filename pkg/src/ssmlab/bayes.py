"""Priors, Metropolis-Hastings samplers, convergence diagnostics and data cloning."""
from __future__ import annotations

import functools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from ssmlab.core import ModelDefinition, format_float, make_rng, parallel_map, draw_seed, joint_log_likelihood
from ssmlab.errors import (
    ConfigurationError, DepletionError, DomainError, NumericalError, SSMError, UnsupportedModelError,
)
from ssmlab.estimation import LikelihoodEvaluator

TARGET_ACCEPTANCE = 0.3


# ---------------------------------------------------------------- priors

@dataclass(frozen=True)
class Prior:
    """One of four proper prior families, on the natural scale."""

    family: str
    a: float
    b: float = math.nan

    FAMILIES = ("normal", "uniform", "half_normal", "gamma")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ConfigurationError(f"unknown prior family {self.family!r}; choose from {self.FAMILIES}")
        bad = {
            "normal": not self.b > 0,
            "uniform": not self.a < self.b,
            "half_normal": not self.a > 0,
            "gamma": not (self.a > 0 and self.b > 0),
        }[self.family]
        if bad:
            raise ConfigurationError(f"invalid hyperparameters for {self.family} prior: {self.a}, {self.b}")

    @classmethod
    def parse(cls, value) -> "Prior":
        """From a ``Prior``, a ``(family, a[, b])`` tuple or a dict with a ``family`` key."""
        if isinstance(value, Prior):
            return value
        if isinstance(value, Mapping):
            v = dict(value)
            fam = v.pop("family", v.pop("dist", None))
            keys = {"normal": ("mean", "sd"), "uniform": ("lower", "upper"),
                    "half_normal": ("sd",), "gamma": ("shape", "rate")}.get(fam)
            if keys is None:
                raise ConfigurationError(f"unknown prior family {fam!r}")
            try:
                return cls(fam, *[float(v[k]) for k in keys])
            except KeyError as e:
                raise ConfigurationError(f"{fam} prior needs {keys}") from e
        fam, *args = value
        return cls(fam, *map(float, args))

    def logpdf(self, x: float) -> float:
        f, a, b = self.family, self.a, self.b
        if f == "normal":
            return -0.5 * ((x - a) / b) ** 2 - math.log(b) - 0.5 * math.log(2 * math.pi)
        if f == "uniform":
            return -math.log(b - a) if a <= x <= b else -math.inf
        if f == "half_normal":
            return (0.5 * math.log(2 / math.pi) - math.log(a) - 0.5 * (x / a) ** 2) if x >= 0 else -math.inf
        if x <= 0:
            return -math.inf
        return a * math.log(b) - special.gammaln(a) + (a - 1) * math.log(x) - b * x

    def to_dict(self) -> dict:
        keys = {"normal": ("mean", "sd"), "uniform": ("lower", "upper"),
                "half_normal": ("sd",), "gamma": ("shape", "rate")}[self.family]
        return {"family": self.family, **{k: v for k, v in zip(keys, (self.a, self.b))}}


@dataclass(frozen=True)
class PriorSpec:
    priors: Mapping[str, Prior]

    @classmethod
    def build(cls, priors: Mapping) -> "PriorSpec":
        return cls({k: Prior.parse(v) for k, v in priors.items()})

    def check(self, model: ModelDefinition) -> None:
        names = model.spec.free_names
        missing = [n for n in names if n not in self.priors]
        if missing:
            raise ConfigurationError(f"no prior given for free parameter(s) {missing}")
        extra = [n for n in self.priors if n not in names]
        if extra:
            raise ConfigurationError(f"priors given for parameters that are not free: {extra}")

    def logpdf(self, theta: Mapping) -> float:
        return float(sum(p.logpdf(float(theta[n])) for n, p in self.priors.items()))

    def to_dict(self) -> dict:
        return {k: v.to_dict() for k, v in self.priors.items()}


def default_priors(model: ModelDefinition) -> PriorSpec:
    """Weakly informative defaults: half-normal(1) for positive, uniform(0,1) for
    unit-interval and normal(0, 10) for unbounded parameters."""
    out = {}
    for n in model.spec.free_names:
        tr = model.spec.transform_of(n)
        if tr.kind == "log":
            out[n] = Prior("half_normal", 1.0)
        elif tr.kind == "logit":
            lo = 0.0 if tr.lower is None else tr.lower
            hi = 1.0 if tr.upper is None else tr.upper
            out[n] = Prior("uniform", lo, hi)
        else:
            out[n] = Prior("normal", 0.0, 10.0)
    return PriorSpec(out)


# ---------------------------------------------------------------- posterior samples

@dataclass
class PosteriorSamples:
    names: tuple
    draws: np.ndarray            # (chains, draws, k) natural scale
    logpost: np.ndarray          # (chains, draws)
    acceptance: np.ndarray       # (chains,) over retained draws
    warmup: int
    method: str
    states: np.ndarray | None = None   # (chains, draws, T + 1, d)
    power: float = 1.0
    warnings: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def mean(self) -> dict:
        return {n: float(self.draws[:, :, j].mean()) for j, n in enumerate(self.names)}

    def var(self) -> dict:
        return {n: float(self.draws[:, :, j].var(ddof=1)) for j, n in enumerate(self.names)}

    def mc_se(self) -> dict:
        """Monte Carlo standard error of each posterior mean (autocorrelation-adjusted)."""
        out = {}
        for j, n in enumerate(self.names):
            x = self.draws[:, :, j]
            ess = effective_sample_size(x)
            out[n] = float(x.std(ddof=1) / math.sqrt(ess)) if ess > 0 else math.inf
        return out

    def state_autocorrelation(self, lag: int = 1) -> float | None:
        """Mean lag-``lag`` autocorrelation of successive state draws, averaged over time and chains."""
        if self.states is None or self.n_draws <= lag + 1:
            return None
        s = self.states[..., 0]               # (C, D, T+1)
        s = s - s.mean(axis=1, keepdims=True)
        num = (s[:, lag:] * s[:, :-lag]).sum(axis=1)
        den = (s * s).sum(axis=1)
        ok = den > 0
        return float(np.mean(num[ok] / den[ok])) if np.any(ok) else None

    def summary(self) -> dict:
        q = np.quantile(self.draws, [0.025, 0.5, 0.975], axis=(0, 1))
        out = {
            "method": self.method,
            "chains": self.n_chains,
            "draws_per_chain": self.n_draws,
            "warmup": self.warmup,
            "power": self.power,
            "acceptance": self.acceptance.tolist(),
            "mean": self.mean(),
            "mc_se": self.mc_se(),
            "quantiles": {n: {"2.5%": float(q[0, j]), "50%": float(q[1, j]), "97.5%": float(q[2, j])}
                          for j, n in enumerate(self.names)},
            "warnings": list(self.warnings),
        }
        if self.n_chains >= 2 and self.n_draws >= 10:
            gr = gelman_rubin(self)
            out["rhat"] = gr.rhat
            out["converged"] = gr.converged
        ac = self.state_autocorrelation()
        if ac is not None:
            out["state_lag1_autocorrelation"] = ac
        return out

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(["chain", "draw", *self.names, "logpost"]) + "\n")
            for c in range(self.n_chains):
                for d in range(self.n_draws):
                    row = [str(c), str(d)] + [format_float(v) for v in self.draws[c, d]]
                    fh.write(",".join(row + [format_float(self.logpost[c, d])]) + "\n")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def effective_sample_size(x: np.ndarray) -> float:
    """Multi-chain ESS from autocorrelations truncated at the first negative pair sum."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    if n < 4:
        return float(m * n)
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    w = acov[:, 0].mean()
    if w <= 0:
        return float(m * n)
    var_plus = w * (n - 1) / n + (x.mean(axis=1).var(ddof=1) if m > 1 else 0.0)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    # Geyer's initial positive sequence over pairs (rho_2k + rho_2k+1)
    tau = -1.0
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    tau = max(tau, 1.0 / math.log10(max(m * n, 10)))
    return float(m * n / tau)


# ---------------------------------------------------------------- convergence

@dataclass(frozen=True)
class GelmanRubin:
    rhat: dict
    threshold: float

    @property
    def converged(self) -> bool:
        return all(v < self.threshold for v in self.rhat.values())


def split_rhat(x: np.ndarray, split: bool = True) -> float:
    """Potential scale reduction for an array of shape ``(chains, draws)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError("R-hat requires at least two chains")
    if x.shape[1] < 10:
        raise ConfigurationError("R-hat requires at least 10 draws per chain")
    if split:
        h = x.shape[1] // 2
        x = np.concatenate([x[:, :h], x[:, x.shape[1] - h:]], axis=0)
    n = x.shape[1]
    W = x.var(axis=1, ddof=1).mean()
    B = n * x.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else math.inf
    return float(math.sqrt(((n - 1) / n * W + B / n) / W))


def gelman_rubin(samples, threshold: float = 1.1, split: bool = True) -> GelmanRubin:
    """Split-chain R-hat per parameter; converged when every value is below ``threshold``."""
    if isinstance(samples, PosteriorSamples):
        if samples.n_chains < 2:
            raise ConfigurationError("R-hat requires at least two chains")
        return GelmanRubin({n: split_rhat(samples.draws[:, :, j], split)
                            for j, n in enumerate(samples.names)}, threshold)
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return GelmanRubin({f"x{j}": split_rhat(arr[:, :, j], split) for j in range(arr.shape[2])}, threshold)


# ---------------------------------------------------------------- proposal and adaptation

class _Proposal:
    """Gaussian random walk on the transformed scale.

    During warm-up the overall scale follows a Robbins-Monro rule towards
    the target acceptance; half-way through warm-up the proposal shape is
    replaced by the empirical covariance of the warm-up draws so far.
    Everything is frozen once warm-up ends.
    """

    batch = 50

    def __init__(self, sds, warmup: int, adapt: bool):
        self.L = np.diag(np.asarray(sds, dtype=float))
        self.k = self.L.shape[0]
        self.log_scale = 0.0
        self.warmup = warmup
        self.adapt = adapt and warmup > 0
        self.hist = []
        self.acc = 0
        self.n_batch = 0

    def draw(self, x, rng):
        return x + math.exp(self.log_scale) * (self.L @ rng.standard_normal(self.k))

    def update(self, it: int, accepted: bool, x) -> None:
        if not self.adapt or it >= self.warmup:
            return
        self.acc += accepted
        self.hist.append(np.array(x, dtype=float))
        if (it + 1) % self.batch == 0:
            self.n_batch += 1
            rate = self.acc / self.batch
            self.log_scale += (rate - TARGET_ACCEPTANCE) * 2.0 / math.sqrt(self.n_batch)
            self.acc = 0
        if it + 1 == self.warmup // 2 and self.k > 1 and len(self.hist) >= 100:
            h = np.array(self.hist[len(self.hist) // 2:])
            cov = np.cov(h, rowvar=False)
            cov += 1e-10 * np.eye(self.k) * max(1.0, float(np.trace(cov)) / self.k)
            try:
                self.L = np.linalg.cholesky(cov) * (2.38 / math.sqrt(self.k))
                self.log_scale = 0.0
                self.n_batch = 0
            except np.linalg.LinAlgError:
                pass


def _check_ordering(theta, ordering):
    if not ordering:
        return True
    vals = [theta[n] for n in ordering]
    return all(a < b for a, b in zip(vals, vals[1:]))


@dataclass
class _Target:
    """Unnormalized log-posterior on the transformed scale."""

    model: ModelDefinition
    priors: PriorSpec
    power: float = 1.0
    ordering: tuple = ()

    def prior_part(self, x):
        spec = self.model.spec
        try:
            theta = spec.from_unconstrained(x)
        except DomainError:
            return None, -math.inf
        if not _check_ordering(theta, self.ordering):
            return theta, -math.inf
        lp = self.priors.logpdf(theta)
        if not math.isfinite(lp):
            return theta, -math.inf
        return theta, lp + float(spec.log_jacobian(x))


def _initial_points(target: _Target, center, n_chains, spread, rng_for, evaluate):
    """Dispersed starting points around ``center`` (transformed scale)."""
    theta, lp = target.prior_part(center)
    if not math.isfinite(lp):
        raise ConfigurationError("prior density is zero (or ordering violated) at the initial values")
    out = []
    for c in range(n_chains):
        rng = rng_for(c)
        for attempt in range(200):
            x = center + spread * rng.standard_normal(center.size)
            val, aux = evaluate(x, rng)
            if math.isfinite(val):
                break
        else:
            # no dispersed start is feasible: fall back to the center itself
            x = center.copy()
            val, aux = evaluate(x, rng)
            if not math.isfinite(val):
                raise DomainError("posterior density is zero at the initial values")
        out.append((x, val, aux))
    return out


def _validate_run(chains, iters, warmup):
    if chains < 1:
        raise ConfigurationError("need at least one chain")
    if iters < 1:
        raise ConfigurationError("iters must be positive")
    warmup = iters // 2 if warmup is None else int(warmup)
    if not 0 <= warmup < iters:
        raise ConfigurationError("warmup must lie in [0, iters)")
    return warmup


def _default_sds(model, proposal_sds):
    names = model.spec.free_names
    if proposal_sds is None:
        return np.full(len(names), 0.1)
    if isinstance(proposal_sds, Mapping):
        return np.array([float(proposal_sds.get(n, 0.1)) for n in names])
    sds = np.broadcast_to(np.asarray(proposal_sds, dtype=float), (len(names),)).copy()
    if np.any(sds < 0):
        raise ConfigurationError("proposal SDs must be nonnegative")
    return sds


# ---------------------------------------------------------------- random-walk MH

def acceptance_probability(log_current: float, log_proposed: float) -> float:
    """``min(1, p(proposed) / p(current))`` for a symmetric proposal."""
    if not math.isfinite(log_proposed):
        return 0.0
    if not math.isfinite(log_current):
        return 1.0
    return math.exp(min(0.0, log_proposed - log_current))


def metropolis(log_density, x0, iters: int, proposal_sd, seed: int = 0) -> tuple[np.ndarray, float]:
    """Plain Gaussian random-walk Metropolis on an arbitrary log-density.

    Returns the ``(iters, k)`` chain (without the starting point) and the
    acceptance rate.
    """
    rng = make_rng(seed)
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    lp = float(log_density(x))
    if not math.isfinite(lp):
        raise ConfigurationError("log-density is not finite at the starting point")
    sd = np.broadcast_to(np.asarray(proposal_sd, dtype=float), x.shape)
    out = np.empty((iters, x.size))
    steps = rng.standard_normal((iters, x.size)) * sd
    logu = np.log(rng.random(iters))
    acc = 0
    for i in range(iters):
        xp = x + steps[i]
        lpp = float(log_density(xp))
        if logu[i] < lpp - lp:
            x, lp = xp, lpp
            acc += 1
        out[i] = x
    return out, acc / iters if iters else math.nan


def _marginal_eval(target: _Target, ev: LikelihoodEvaluator):
    def evaluate(x, rng):
        theta, lp = target.prior_part(x)
        if not math.isfinite(lp):
            return -math.inf, None
        ll = ev.safe(theta)
        return (target.power * ll + lp if math.isfinite(ll) else -math.inf), None
    return evaluate


def _mh_chain(c, *, target, ev_factory, start, iters, warmup, sds, adapt, seed, stream, store_states=False):
    rng = make_rng(seed, stream, c)
    evaluate = ev_factory()
    x, val, aux = start
    prop = _Proposal(sds, warmup, adapt)
    k = x.size
    keep = iters - warmup
    draws = np.empty((keep, k))
    lps = np.empty(keep)
    states = [] if store_states else None
    acc = 0
    fails = 0
    for it in range(iters):
        xp = prop.draw(x, rng)
        vp, auxp = evaluate(xp, rng)
        accept = math.isfinite(vp) and math.log(rng.random()) < vp - val
        if auxp is _DEPLETED:
            fails += 1
            if fails >= 200:
                raise DepletionError(f"particle filter depleted for 200 consecutive proposals near "
                                     f"{target.model.spec.from_unconstrained(xp)}")
        else:
            fails = 0
        if accept:
            x, val, aux = xp, vp, auxp
        prop.update(it, accept, x)
        if it >= warmup:
            j = it - warmup
            draws[j] = x
            lps[j] = val
            acc += accept
            if store_states:
                states.append(aux)
    spec = target.model.spec
    nat = spec.from_unconstrained(draws) if keep else {}
    nat = np.column_stack([np.asarray(nat[n], dtype=float) for n in spec.free_names]) if keep else draws
    rate = acc / keep if keep else math.nan
    return nat, lps, rate, (np.array(states) if store_states else None)


_DEPLETED = object()


def _collect(results, names, warmup, method, power=1.0):
    draws = np.array([r[0] for r in results])
    lps = np.array([r[1] for r in results])
    acc = np.array([r[2] for r in results])
    states = np.array([r[3] for r in results]) if results[0][3] is not None else None
    return PosteriorSamples(tuple(names), draws, lps, acc, warmup, method, states, power)


def _center(model, init):
    return model.spec.to_unconstrained(model.theta(init))


def _make_marginal_evaluate(model, data, priors, backend, power, ordering, grid_cells):
    ev = LikelihoodEvaluator(model, data, backend, grid_cells=grid_cells)
    return _marginal_eval(_Target(model, priors, power, ordering), ev)


def rw_metropolis(model: ModelDefinition, data, priors=None, backend: str = "auto", chains: int = 4,
                  iters: int = 4000, warmup: int | None = None, proposal_sds=None, seed: int = 0, *,
                  init: Mapping | None = None, power: float = 1.0, ordering: Sequence[str] = (),
                  adapt: bool = True, init_spread: float = 0.5, grid_cells: int = 400,
                  workers: int = 1) -> PosteriorSamples:
    """Random-walk Metropolis on the marginal likelihood.

    Works on the transformed scale (the Jacobian enters the target).  The
    likelihood is raised to ``power`` (data cloning).  Chain ``c`` starts at
    a dispersed point around ``init`` and uses its own random stream, so
    results do not depend on ``workers``.
    """
    priors = default_priors(model) if priors is None else (
        priors if isinstance(priors, PriorSpec) else PriorSpec.build(priors))
    priors.check(model)
    warmup = _validate_run(chains, iters, warmup)
    if backend == "particle":
        raise ConfigurationError("rw_metropolis needs a deterministic likelihood; use pmmh for particle filters")
    ordering = tuple(ordering)
    target = _Target(model, priors, power, ordering)
    factory = functools.partial(_make_marginal_evaluate, model, data, priors, backend, power, ordering, grid_cells)
    evaluate = factory()
    starts = _initial_points(target, _center(model, init), chains, init_spread,
                             lambda c: make_rng(seed, 0, c), evaluate)
    sds = _default_sds(model, proposal_sds)
    fn = _ChainRunner(target=target, ev_factory=factory, starts=starts, iters=iters, warmup=warmup,
                      sds=sds, adapt=adapt, seed=seed, stream=1)
    res = parallel_map(fn, range(chains), workers)
    out = _collect(res, model.spec.free_names, warmup, "rw_metropolis", power)
    _mixing_warnings(out)
    return out


@dataclass
class _ChainRunner:
    target: _Target
    ev_factory: object
    starts: list
    iters: int
    warmup: int
    sds: np.ndarray
    adapt: bool
    seed: int
    stream: int
    store_states: bool = False

    def __call__(self, c):
        return _mh_chain(c, target=self.target, ev_factory=self.ev_factory, start=self.starts[c],
                         iters=self.iters, warmup=self.warmup, sds=self.sds, adapt=self.adapt,
                         seed=self.seed, stream=self.stream, store_states=self.store_states)


def _mixing_warnings(s: PosteriorSamples):
    low = [i for i, a in enumerate(s.acceptance) if a < 0.05]
    if low:
        msg = f"chains {low} accepted fewer than 5% of proposals; mixing is poor"
        s.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)


# ---------------------------------------------------------------- particle-marginal MH

def _make_pmmh_evaluate(model, data, priors, N, ordering, store_states):
    from ssmlab.smc import bootstrap_filter
    target = _Target(model, priors, 1.0, ordering)
    sd = model.prepare(data)

    def evaluate(x, rng):
        theta, lp = target.prior_part(x)
        if not math.isfinite(lp):
            return -math.inf, None
        frng = make_rng(draw_seed(rng))
        try:
            fr = bootstrap_filter(model, sd, theta, N, rng=frng, sample_trajectory=store_states)
        except DepletionError:
            return -math.inf, _DEPLETED
        except (DomainError, NumericalError):
            return -math.inf, None
        if not math.isfinite(fr.loglik):
            return -math.inf, None
        return fr.loglik + lp, fr.trajectory
    return evaluate


def pmmh(model: ModelDefinition, data, priors=None, N: int = 500, chains: int = 4, iters: int = 4000,
         warmup: int | None = None, proposal_sds=None, seed: int = 0, *, init: Mapping | None = None,
         ordering: Sequence[str] = (), adapt: bool = True, init_spread: float = 0.5,
         store_states: bool = False, workers: int = 1) -> PosteriorSamples:
    """Particle-marginal Metropolis-Hastings.

    Each proposal gets a fresh bootstrap-filter estimate (seed drawn from the
    chain's stream); the current estimate is retained until a proposal is
    accepted.  With ``store_states`` each retained draw carries a state path
    sampled from the accepted filter's particles.
    """
    priors = default_priors(model) if priors is None else (
        priors if isinstance(priors, PriorSpec) else PriorSpec.build(priors))
    priors.check(model)
    warmup = _validate_run(chains, iters, warmup)
    if N < 1:
        raise ConfigurationError("N must be positive")
    ordering = tuple(ordering)
    target = _Target(model, priors, 1.0, ordering)
    factory = functools.partial(_make_pmmh_evaluate, model, data, priors, N, ordering, store_states)
    evaluate = factory()
    starts = _initial_points(target, _center(model, init), chains, init_spread,
                             lambda c: make_rng(seed, 0, c), evaluate)
    sds = _default_sds(model, proposal_sds)
    fn = _ChainRunner(target=target, ev_factory=factory, starts=starts, iters=iters, warmup=warmup,
                      sds=sds, adapt=adapt, seed=seed, stream=1, store_states=store_states)
    res = parallel_map(fn, range(chains), workers)
    out = _collect(res, model.spec.free_names, warmup, "pmmh")
    _mixing_warnings(out)
    return out


# ---------------------------------------------------------------- MH-within-Gibbs with FFBS

def _gibbs_chain(c, *, model, data, priors, start, iters, warmup, sds, adapt, seed, ordering):
    from ssmlab.kalman import ffbs_sample, kalman_filter
    rng = make_rng(seed, 1, c)
    spec = model.spec
    sd = model.prepare(data)
    target = _Target(model, priors, 1.0, ordering)
    x = start
    theta = spec.from_unconstrained(x)
    z = ffbs_sample(kalman_filter(model, sd, theta), rng=rng)
    prop = _Proposal(sds, warmup, adapt)
    keep = iters - warmup
    draws = np.empty((keep, x.size))
    lps = np.empty(keep)
    states = np.empty((keep,) + z.shape)
    acc = 0

    def joint(xv, zv):
        th, lp = target.prior_part(xv)
        if not math.isfinite(lp):
            return -math.inf
        try:
            model.check_theta(th)
            v = joint_log_likelihood(model, th, zv, sd)
        except SSMError:
            return -math.inf
        return v + lp if math.isfinite(v) else -math.inf

    val = joint(x, z)
    for it in range(iters):
        xp = prop.draw(x, rng)
        vp = joint(xp, z)
        accept = math.isfinite(vp) and math.log(rng.random()) < vp - val
        if accept:
            x = xp
        prop.update(it, accept, x)
        theta = spec.from_unconstrained(x)
        z = ffbs_sample(kalman_filter(model, sd, theta), rng=rng)
        val = joint(x, z)
        if it >= warmup:
            j = it - warmup
            draws[j] = [theta[n] for n in spec.free_names]
            lps[j] = val
            states[j] = z
            acc += accept
    return draws, lps, acc / keep if keep else math.nan, states


def gibbs_ffbs(model: ModelDefinition, data, priors=None, chains: int = 4, iters: int = 4000,
               warmup: int | None = None, proposal_sds=None, seed: int = 0, *, init: Mapping | None = None,
               ordering: Sequence[str] = (), adapt: bool = True, init_spread: float = 0.5,
               workers: int = 1) -> PosteriorSamples:
    """Alternate MH parameter updates given the states with exact FFBS state draws.

    ``logpost`` records the joint log-density of parameters and sampled
    states.  Successive state draws are typically highly autocorrelated;
    see :meth:`PosteriorSamples.state_autocorrelation`.
    """
    if not model.has_linear_gaussian:
        raise UnsupportedModelError(f"gibbs_ffbs needs a linear-Gaussian model; {model.name} is not")
    priors = default_priors(model) if priors is None else (
        priors if isinstance(priors, PriorSpec) else PriorSpec.build(priors))
    priors.check(model)
    warmup = _validate_run(chains, iters, warmup)
    ordering = tuple(ordering)
    target = _Target(model, priors, 1.0, ordering)
    evaluate = _make_marginal_evaluate(model, data, priors, "kalman", 1.0, ordering, 400)
    starts = _initial_points(target, _center(model, init), chains, init_spread,
                             lambda c: make_rng(seed, 0, c), evaluate)
    fn = functools.partial(_gibbs_chain, model=model, data=data, priors=priors, iters=iters, warmup=warmup,
                           sds=_default_sds(model, proposal_sds), adapt=adapt, seed=seed, ordering=ordering)
    res = parallel_map(_GibbsRunner(fn, [s[0] for s in starts]), range(chains), workers)
    out = _collect(res, model.spec.free_names, warmup, "gibbs_ffbs")
    _mixing_warnings(out)
    return out


@dataclass
class _GibbsRunner:
    fn: object
    starts: list

    def __call__(self, c):
        return self.fn(c, start=self.starts[c])


# ---------------------------------------------------------------- data cloning

@dataclass(frozen=True)
class CloningReport:
    K: tuple
    names: tuple
    variance: dict          # name -> list over K
    mean: dict
    slope: dict             # least-squares slope of log var on log K
    ratio: dict             # var(K_max) / var(K_min)
    converged: tuple        # per K
    rhat: tuple

    def verdict(self, name: str, plateau: float = 0.5) -> str:
        """``'identifiable'`` when variance shrinks like 1/K, ``'suspect'`` on a plateau."""
        return "suspect" if self.ratio[name] > plateau else "identifiable"

    def to_dict(self) -> dict:
        return {"K": list(self.K), "variance": self.variance, "mean": self.mean, "slope": self.slope,
                "ratio": self.ratio, "converged": list(self.converged), "rhat": list(self.rhat)}


def data_cloning(model: ModelDefinition, data, priors=None, K_list: Sequence[int] = (1, 4, 16), *,
                 backend: str = "auto", chains: int = 4, iters: int = 4000, warmup: int | None = None,
                 seed: int = 0, init: Mapping | None = None, workers: int = 1, **kw) -> CloningReport:
    """Posterior variance against the number of data clones ``K``.

    Each ``K`` runs :func:`rw_metropolis` with the likelihood raised to the
    power ``K`` (the same as ``K`` independent copies of the data).
    """
    K_list = tuple(int(k) for k in K_list)
    if not K_list or K_list[0] < 1 or any(b <= a for a, b in zip(K_list, K_list[1:])):
        raise ConfigurationError("K_list must be increasing integers >= 1")
    names = model.spec.free_names
    var = {n: [] for n in names}
    mean = {n: [] for n in names}
    conv, rhats = [], []
    for K in K_list:
        s = rw_metropolis(model, data, priors, backend, chains, iters, warmup, seed=draw_seed(make_rng(seed, 5, K)),
                          init=init, power=K, workers=workers, **kw)
        v, m = s.var(), s.mean()
        for n in names:
            var[n].append(v[n])
            mean[n].append(m[n])
        if chains >= 2:
            gr = gelman_rubin(s)
            conv.append(gr.converged)
            rhats.append(gr.rhat)
            if not gr.converged:
                warnings.warn(f"data cloning: sampler did not converge at K={K}", RuntimeWarning, stacklevel=2)
        else:
            conv.append(None)
            rhats.append(None)
    lk = np.log(K_list)
    slope = {}
    for n in names:
        lv = np.log(np.maximum(var[n], 1e-300))
        slope[n] = float(np.polyfit(lk, lv, 1)[0]) if len(K_list) > 1 else math.nan
    ratio = {n: float(var[n][-1] / var[n][0]) if var[n][0] > 0 else math.nan for n in names}
    return CloningReport(K_list, tuple(names), var, mean, slope, ratio, tuple(conv), tuple(rhats))
