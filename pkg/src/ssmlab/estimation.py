"""Maximum likelihood, finite-difference curvature and identifiability diagnostics."""
from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from ssmlab.core import ModelDefinition, TimeSeriesData, make_rng, parallel_map, simulate
from ssmlab.errors import (
    ConfigurationError, DomainError, EstimabilityError, NumericalError, SSMError, UnsupportedModelError,
)

BACKENDS = ("kalman", "laplace", "grid", "particle", "hmm")


# ---------------------------------------------------------------- Nelder-Mead

@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    trace: list          # best (x, f) after each iteration
    n_iter: int
    n_eval: int
    converged: bool


def nelder_mead(fun: Callable, x0, *, step=0.1, xatol: float = 1e-8, fatol: float = 1e-10,
                max_iter: int = 10000, max_eval: int | None = None) -> NelderMeadResult:
    """Downhill simplex minimization.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5.  Stops when
    every vertex lies within ``xatol`` of the best one (max-norm) and their
    objective values within ``fatol``.  ``fun`` may return ``+inf`` to
    reject points (a barrier); reaching ``max_iter`` returns a result with
    ``converged=False``.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n = x0.size
    f0 = float(fun(x0))
    if not math.isfinite(f0):
        raise DomainError("objective is not finite at the starting point")
    n_eval = 1
    steps = np.broadcast_to(np.asarray(step, dtype=float), (n,)).copy()
    sim = [x0]
    fs = [f0]
    for i in range(n):
        h = steps[i] if steps[i] != 0 else 0.1
        # try +h, -h, +h/2, -h/2, ... until the vertex is feasible
        for attempt in range(40):
            v = x0.copy()
            v[i] += h * (0.5 ** (attempt // 2)) * (1 if attempt % 2 == 0 else -1)
            fv = float(fun(v))
            n_eval += 1
            if math.isfinite(fv):
                break
        sim.append(v)
        fs.append(fv)
    sim = np.array(sim)
    fs = np.array(fs)
    trace = []
    max_eval = max_eval or 200 * max_iter
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        trace.append((sim[0].copy(), float(fs[0])))
        if (np.max(np.abs(sim[1:] - sim[0])) <= xatol and np.max(np.abs(fs[1:] - fs[0])) <= fatol):
            converged = True
            break
        if n_eval >= max_eval:
            break
        centroid = sim[:-1].mean(axis=0)
        xr = centroid + (centroid - sim[-1])
        fr = float(fun(xr))
        n_eval += 1
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - sim[-1])
            fe = float(fun(xe))
            n_eval += 1
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = centroid + 0.5 * (xr - centroid)      # outside contraction
            fc = float(fun(xc))
            n_eval += 1
            if fc <= fr:
                sim[-1], fs[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (sim[-1] - centroid)  # inside contraction
            fc = float(fun(xc))
            n_eval += 1
            if fc < fs[-1]:
                sim[-1], fs[-1] = xc, fc
                continue
        for j in range(1, n + 1):                      # shrink towards the best vertex
            sim[j] = sim[0] + 0.5 * (sim[j] - sim[0])
            fs[j] = float(fun(sim[j]))
            n_eval += 1
    order = np.argsort(fs, kind="stable")
    sim, fs = sim[order], fs[order]
    if not trace or trace[-1][1] != fs[0]:
        trace.append((sim[0].copy(), float(fs[0])))
    return NelderMeadResult(sim[0].copy(), float(fs[0]), trace, it, n_eval, converged)


# ---------------------------------------------------------------- finite differences

def fd_hessian(fun: Callable, x, step: float = 1e-3) -> np.ndarray:
    """Central-difference Hessian with one absolute step for every coordinate.

    Diagonal entries use the ``±2h`` stencil so that they share evaluation
    points with the mixed entries; a function of ``x_i + x_j`` alone then
    yields an exactly singular block.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    h = float(step)
    f0 = float(fun(x))
    H = np.empty((n, n))
    E = np.eye(n) * h
    for i in range(n):
        fpp = float(fun(x + 2 * E[i]))
        fmm = float(fun(x - 2 * E[i]))
        H[i, i] = (fpp - 2 * f0 + fmm) / (4 * h * h)
        for j in range(i + 1, n):
            a = float(fun(x + E[i] + E[j]))
            b = float(fun(x + E[i] - E[j]))
            c = float(fun(x - E[i] + E[j]))
            d = float(fun(x - E[i] - E[j]))
            H[i, j] = H[j, i] = (a - b - c + d) / (4 * h * h)
    if not np.all(np.isfinite(H)):
        raise NumericalError("finite-difference Hessian has non-finite entries")
    return 0.5 * (H + H.T)


def fd_gradient(fun: Callable, x, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


# ---------------------------------------------------------------- likelihood backends

def default_backend(model: ModelDefinition) -> str:
    if model.discrete:
        return "hmm"
    if model.has_linear_gaussian:
        return "kalman"
    if model.state_dim == 1:
        return "grid"
    return "laplace"


def check_backend(model: ModelDefinition, backend: str) -> str:
    if backend in (None, "auto"):
        return default_backend(model)
    if backend not in BACKENDS:
        raise ConfigurationError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if backend == "kalman" and not model.has_linear_gaussian:
        raise ConfigurationError(f"backend 'kalman' needs a linear-Gaussian model; {model.name} is not")
    if backend == "grid" and (model.state_dim != 1 or model.discrete):
        raise ConfigurationError("backend 'grid' needs a one-dimensional continuous state")
    if backend == "hmm" and not model.discrete:
        raise ConfigurationError("backend 'hmm' needs a finite-state model")
    if backend in ("laplace", "particle") and model.discrete:
        raise ConfigurationError(f"backend {backend!r} cannot handle categorical states; use 'hmm'")
    return backend


@dataclass
class LikelihoodEvaluator:
    """``theta -> log L(theta | data)`` for one backend, with the data bound once."""

    model: ModelDefinition
    data: object
    backend: str = "auto"
    particles: int = 1000
    seed: int = 0
    grid_cells: int = 400
    grid_bounds: tuple | None = None

    def __post_init__(self):
        self.backend = check_backend(self.model, self.backend)
        self.sd = self.model.prepare(self.data)

    def __call__(self, theta) -> float:
        from ssmlab import discretized, kalman, laplace, smc
        m, sd = self.model, self.sd
        if self.backend == "kalman":
            return kalman.kalman_loglik(m, sd, theta)
        if self.backend == "laplace":
            return laplace.laplace_marginal_loglik(m, sd, theta)
        if self.backend == "grid":
            grid = None
            if self.grid_bounds is not None:
                grid = discretized.StateGrid(self.grid_bounds[0], self.grid_bounds[1], self.grid_cells)
            return discretized.grid_loglik(m, sd, theta, grid=grid, m=self.grid_cells)
        if self.backend == "hmm":
            return discretized.hmm_loglik(m, sd, theta)
        return smc.particle_loglik(m, sd, theta, N=self.particles, seed=self.seed)

    def terms(self, theta) -> np.ndarray:
        """Per-step one-step predictive log-densities ``log p(y_t | y_{1:t-1})``."""
        from ssmlab import discretized, kalman, smc
        m, sd = self.model, self.sd
        if self.backend == "kalman":
            return kalman.kalman_filter(m, sd, theta).loglik_terms
        if self.backend == "grid":
            return discretized.grid_filter(m, sd, theta, m=self.grid_cells).loglik_terms
        if self.backend == "hmm":
            return discretized.hmm_forward(m, sd, theta).loglik_terms()
        if self.backend == "particle":
            return smc.bootstrap_filter(m, sd, theta, N=self.particles, seed=self.seed).loglik_terms
        raise UnsupportedModelError("the Laplace backend does not decompose into one-step terms")

    def safe(self, theta) -> float:
        """Log-likelihood, or ``-inf`` when it cannot be evaluated at ``theta``."""
        try:
            v = self(theta)
        except (SSMError, FloatingPointError, np.linalg.LinAlgError, ValueError, OverflowError):
            return -math.inf
        return v if math.isfinite(v) else -math.inf


# ---------------------------------------------------------------- fitting

@dataclass
class FitResult:
    """Point estimate with curvature on the transformed scale.

    ``hessian`` is the Hessian of the negative log-likelihood with respect
    to the free parameters on the transformed (optimizer) scale.
    """

    model: ModelDefinition
    theta: dict
    x: np.ndarray
    names: tuple
    loglik: float
    backend: str
    hessian: np.ndarray | None
    se: dict | None
    se_unconstrained: np.ndarray | None
    converged: bool
    trace: list
    n_eval: int
    T: int
    options: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.names)

    def to_dict(self) -> dict:
        from ssmlab.selection import aic
        return {
            "backend": self.backend,
            "converged": self.converged,
            "loglik": self.loglik,
            "aic": aic(self),
            "n_free": self.k,
            "n_obs": self.T,
            "theta": {k: float(v) for k, v in self.theta.items()},
            "free": list(self.names),
            "se": None if self.se is None else {k: float(v) for k, v in self.se.items()},
            "hessian": None if self.hessian is None else self.hessian.tolist(),
            "n_eval": self.n_eval,
            "options": self.options,
            "warnings": list(self.warnings),
        }


def _objective(evaluator, spec):
    def f(x):
        try:
            theta = spec.from_unconstrained(x)
        except DomainError:
            return math.inf
        return -evaluator.safe(theta)
    return f


def fit_mle(model: ModelDefinition, data, backend: str = "auto", theta_init: Mapping | None = None, *,
            particles: int = 1000, seed: int = 0, grid_cells: int = 400, grid_bounds=None,
            xatol: float = 1e-7, fatol: float = 1e-9, max_iter: int = 5000, step: float = 0.2,
            hessian_step: float | None = None, restart: bool = True, compute_hessian: bool = True
            ) -> FitResult:
    """Maximize the marginal likelihood over the free parameters.

    Optimization runs on the transformed scale by Nelder-Mead, restarted
    once from the optimum.  The particle backend evaluates every point with
    the same filter seed (common random numbers), which makes the surface
    deterministic but still rough; its curvature uses a larger FD step.
    """
    spec = model.spec
    names = spec.free_names
    ev = LikelihoodEvaluator(model, data, backend, particles, seed, grid_cells, grid_bounds)
    theta0 = model.theta(theta_init)
    x0 = spec.to_unconstrained(theta0)
    notes = []
    if ev.backend == "particle":
        notes.append("particle likelihood is a Monte Carlo estimate: the optimum and curvature are noisy")
    T = int(np.sum(np.any(~np.isnan(ev.sd.y), axis=1)))
    if not names:
        ll = ev(theta0)
        return FitResult(model, theta0, x0, (), ll, ev.backend, None, {}, np.zeros(0), True, [],
                         1, T, {"backend": ev.backend}, notes)
    f = _objective(ev, spec)
    if not math.isfinite(f(x0)):
        raise DomainError("log-likelihood is not finite at the initial parameter values")
    res = nelder_mead(f, x0, step=step, xatol=xatol, fatol=fatol, max_iter=max_iter)
    trace = list(res.trace)
    n_eval = res.n_eval
    if restart:
        res2 = nelder_mead(f, res.x, step=step / 4, xatol=xatol, fatol=fatol, max_iter=max_iter)
        trace += res2.trace
        n_eval += res2.n_eval
        if res2.fun <= res.fun:
            res = NelderMeadResult(res2.x, res2.fun, trace, res.n_iter + res2.n_iter, n_eval, res2.converged)
    x_hat = res.x
    theta_hat = spec.from_unconstrained(x_hat)
    loglik = -res.fun
    converged = res.converged
    if not converged:
        notes.append("optimizer reached its iteration limit before converging")
    H = se = se_x = None
    if compute_hessian:
        h = hessian_step or (5e-2 if ev.backend == "particle" else 1e-3)
        try:
            H = fd_hessian(f, x_hat, h)
        except NumericalError:
            H = None
            notes.append("Hessian could not be evaluated (non-finite likelihood near the optimum)")
        if H is not None:
            se, se_x = _standard_errors(spec, names, x_hat, H)
            if se is None:
                notes.append("Hessian is not positive definite: standard errors unavailable")
    opts = {"backend": ev.backend, "xatol": xatol, "fatol": fatol, "max_iter": max_iter}
    if ev.backend == "particle":
        opts.update(particles=particles, seed=seed)
    if ev.backend == "grid":
        opts.update(grid_cells=grid_cells)
    return FitResult(model, theta_hat, x_hat, tuple(names), float(loglik), ev.backend, H, se, se_x,
                     converged, [(x, -fx) for x, fx in trace], n_eval, T, opts, notes)


def _standard_errors(spec, names, x, H):
    try:
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None, None
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    se_x = np.sqrt(np.sum(Linv * Linv, axis=0))
    if not np.all(np.isfinite(se_x)):
        return None, None
    jac = spec.jacobian_diag(x)
    return {n: float(abs(j) * s) for n, j, s in zip(names, jac, se_x)}, se_x


# ---------------------------------------------------------------- profile likelihood

@dataclass(frozen=True)
class ProfileCurve:
    param: str
    grid: np.ndarray
    loglik: np.ndarray
    max_loglik: float
    flatness: float
    threshold: float
    converged: np.ndarray

    @property
    def flat(self) -> bool:
        return self.flatness < self.threshold

    def to_dict(self) -> dict:
        return {"param": self.param, "grid": self.grid.tolist(), "loglik": self.loglik.tolist(),
                "max_loglik": self.max_loglik, "flatness": self.flatness, "threshold": self.threshold,
                "flat": self.flat, "converged": self.converged.tolist()}


def default_profile_grid(fit: FitResult, param: str, n: int = 21) -> np.ndarray:
    spec = fit.model.spec
    tr = spec.transform_of(param)
    j = fit.names.index(param)
    if fit.se_unconstrained is not None:
        s = fit.se_unconstrained[j]
        xs = fit.x[j] + np.linspace(-3 * s, 3 * s, n)
        with np.errstate(over="ignore"):
            g = np.asarray(tr.inverse(xs), dtype=float)
        # a near-singular curvature gives SEs too wide to be a usable grid
        if np.all(np.isfinite(g)) and s < 5.0 and all(tr.in_support(v) for v in g):
            return g
    v = fit.theta[param]
    half = 0.5 * abs(v) if v != 0 else 0.5
    g = np.linspace(v - half, v + half, n)
    return g[[tr.in_support(x) for x in g]]


def _profile_point(value, model, data, fit, param, backend_kw):
    m = model.with_params(**{param: value}).with_fixed([param])
    init = {k: fit.theta[k] for k in fit.names if k != param}
    try:
        r = fit_mle(m, data, fit.backend, init, compute_hessian=False, **backend_kw)
        return r.loglik, r.converged
    except SSMError:
        return -math.inf, False


def profile_likelihood(model: ModelDefinition, data, fit: FitResult, param: str, grid=None, *,
                       n_points: int = 21, threshold: float = 0.5, workers: int = 1) -> ProfileCurve:
    """Re-maximize over the other free parameters at each grid value of ``param``.

    ``flatness`` is the max minus min profile log-likelihood over the grid;
    values below ``threshold`` indicate a flat ridge.
    """
    if param not in fit.names:
        raise ConfigurationError(f"{param!r} is not a free parameter of the fit")
    grid = default_profile_grid(fit, param, n_points) if grid is None else np.asarray(grid, dtype=float)
    kw = {k: fit.options[k] for k in ("particles", "seed", "grid_cells") if k in fit.options}
    fn = functools.partial(_profile_point, model=model, data=data, fit=fit, param=param, backend_kw=kw)
    out = parallel_map(fn, list(grid), workers)
    ll = np.array([o[0] for o in out])
    ok = np.array([o[1] for o in out])
    finite = ll[np.isfinite(ll)]
    flatness = float(finite.max() - finite.min()) if finite.size else math.nan
    return ProfileCurve(param, grid, ll, fit.loglik, flatness, threshold, ok)


# ---------------------------------------------------------------- identifiability

@dataclass(frozen=True)
class IdentifiabilityReport:
    eigenvalues: np.ndarray
    ratio: float
    rel_tol: float
    verdict: str  # "clear" or "suspect"

    def to_dict(self) -> dict:
        return {"eigenvalues": self.eigenvalues.tolist(), "ratio": self.ratio,
                "rel_tol": self.rel_tol, "verdict": self.verdict}


def hessian_identifiability(fit: FitResult, rel_tol: float = 1e-6) -> IdentifiabilityReport:
    """Eigenvalue check of the (negative log-likelihood) Hessian on the transformed scale."""
    if fit.hessian is None:
        raise ConfigurationError("the fit carries no Hessian")
    ev = np.sort(np.linalg.eigvalsh(fit.hessian))
    if ev.size == 1:
        return IdentifiabilityReport(ev, 1.0, rel_tol, "clear" if ev[0] > 0 else "suspect")
    top = ev[-1]
    ratio = float(ev[0] / top) if top > 0 else -math.inf
    verdict = "suspect" if not ratio >= rel_tol else "clear"
    return IdentifiabilityReport(ev, ratio, rel_tol, verdict)


@dataclass(frozen=True)
class EstimabilityTable:
    names: tuple
    truth: dict
    estimates: np.ndarray      # (n_ok, k) natural scale
    bias: dict
    sd: dict                   # None where undefined
    rmse: dict
    coverage: dict             # None where no replicate had SEs
    n_ok: int
    n_failed: int
    derived: dict

    def to_dict(self) -> dict:
        return {"names": list(self.names), "truth": self.truth, "bias": self.bias, "sd": self.sd,
                "rmse": self.rmse, "coverage": self.coverage, "n_ok": self.n_ok,
                "n_failed": self.n_failed, "derived": self.derived}


def _estimability_rep(i, model, theta_true, times, backend, seed, init_spread, fit_kw):
    _, data = simulate(model, theta_true, times, seed=_child_seed(seed, i))
    init = theta_true
    if init_spread > 0:
        spec = model.spec
        x = spec.to_unconstrained(theta_true)
        init = spec.from_unconstrained(x + init_spread * make_rng(seed, 8, i).standard_normal(x.size))
    try:
        fit = fit_mle(model, data, backend, init, **fit_kw)
    except SSMError:
        return None
    if not fit.converged:
        return None
    return fit.theta, fit.se


def _child_seed(seed, i):
    return int(make_rng(seed, 3, i).integers(0, 2**62))


def simulation_estimability(model: ModelDefinition, theta_true: Mapping | None, T: int, n_rep: int,
                            backend: str = "auto", seed: int = 0, *, workers: int = 1,
                            derived: Mapping[str, Callable] | None = None, times=None,
                            init_spread: float = 0.0, **fit_kw) -> EstimabilityTable:
    """Simulate, refit and summarize recovery of the free parameters.

    Fits start at ``theta_true``, jittered by ``init_spread`` standard
    normal units on the transformed scale when positive (a flat ridge is
    otherwise never explored by a fit started on it).

    Replicates that fail or do not converge are excluded and counted; more
    than half failing raises :class:`EstimabilityError`.  ``derived`` maps
    names to functions of the fitted parameter dict (e.g. a product).
    """
    if n_rep < 1:
        raise ConfigurationError("n_rep must be >= 1")
    theta_true = model.theta(theta_true)
    times = np.arange(1, T + 1, dtype=float) if times is None else times
    fn = functools.partial(_estimability_rep, model=model, theta_true=theta_true, times=times,
                           backend=backend, seed=seed, init_spread=init_spread, fit_kw=fit_kw)
    results = parallel_map(fn, range(n_rep), workers)
    ok = [r for r in results if r is not None]
    n_failed = n_rep - len(ok)
    if n_failed > 0.5 * n_rep:
        raise EstimabilityError(f"{n_failed} of {n_rep} replicate fits failed")
    names = model.spec.free_names
    est = np.array([[th[n] for n in names] for th, _ in ok])
    bias, sd, rmse, cov = {}, {}, {}, {}
    for j, n in enumerate(names):
        e = est[:, j]
        bias[n] = float(e.mean() - theta_true[n])
        sd[n] = float(e.std(ddof=1)) if e.size > 1 else None
        rmse[n] = float(np.sqrt(np.mean((e - theta_true[n]) ** 2)))
        hits = [abs(th[n] - theta_true[n]) <= 1.96 * se[n] for th, se in ok if se is not None]
        cov[n] = float(np.mean(hits)) if hits else None
    dsum = {}
    for dn, g in (derived or {}).items():
        vals = np.array([g(th) for th, _ in ok])
        dsum[dn] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else None}
    return EstimabilityTable(tuple(names), {n: theta_true[n] for n in names}, est, bias, sd, rmse, cov,
                             len(ok), n_failed, dsum)
