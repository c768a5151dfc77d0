"""Command-line interface: ``ssmlab <command> [options]``.

Exit status: 0 success (including flagged, non-converged results), 1 usage
or configuration error, 2 data error, 3 numerical or convergence failure.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from ssmlab import __version__
from ssmlab.core import TimeSeriesData, read_csv, simulate, write_csv, write_table
from ssmlab.errors import ConfigurationError, DataError, NumericalError, SSMError

COMMANDS = ("simulate", "fit", "profile", "ident", "mcmc", "clone", "select", "diagnose", "cv")
STOCHASTIC = {"simulate", "mcmc", "clone", "diagnose"}


class UsageError(ConfigurationError):
    pass


# ---------------------------------------------------------------- helpers

def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _load_model(path):
    from ssmlab.zoo import build_model
    cfg = _load_json(path)
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: model configuration must be a JSON object")
    return build_model(cfg), cfg


def _load_data(path):
    if path is None:
        raise UsageError("--data is required for this command")
    if not Path(path).exists():
        raise DataError(f"data file not found: {path}")
    return read_csv(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class Outputs:
    """Output-directory writer that refuses to overwrite unless forced."""

    def __init__(self, directory, force: bool):
        self.dir = Path(directory)
        self.force = force

    def reserve(self, *names):
        for n in names:
            p = self.dir / n
            if p.exists() and not self.force:
                raise UsageError(f"{p} exists; pass --force to overwrite")
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        return self.dir / name

    def json(self, name, obj):
        with open(self.dir / name, "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=False)
            fh.write("\n")


def _report(args, model_cfgs, model=None, **body):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func",)}
    out = {"tool": "ssmlab", "version": __version__, "command": args.command, "seed": args.seed,
           "config": cfg, "models": model_cfgs}
    if model is not None:
        out["resolved_model"] = {"name": model.name, "params": model.theta(),
                                 "free": list(model.spec.free_names)}
    out.update(body)
    return out


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


def _fit_kw(args):
    return {"particles": args.particles, "seed": args.seed if args.seed is not None else 0,
            "grid_cells": args.grid_cells}


def _need_seed(args, why):
    if args.seed is None:
        raise UsageError(f"--seed is required ({why})")


def _priors(args, model):
    from ssmlab.bayes import PriorSpec, default_priors
    return default_priors(model) if args.priors is None else PriorSpec.build(_load_json(args.priors))


def _write_states(out, name, times, states):
    states = np.asarray(states, dtype=float)
    header = ["time"] + [f"z{j + 1}" for j in range(states.shape[1])]
    write_table(out.path(name), header, [[t, *row] for t, row in zip(times, states)])


# ---------------------------------------------------------------- commands

def cmd_simulate(args, out):
    model, cfg = _load_model(args.model[0])
    if args.times is not None:
        template = read_csv(args.times)
    elif args.T is not None:
        template = np.arange(1, args.T + 1, dtype=float)
    else:
        raise UsageError("simulate needs --T or --times")
    out.reserve("data.csv", "states.csv", "report.json")
    states, data = simulate(model, None, template, seed=args.seed)
    write_csv(data, out.path("data.csv"))
    _write_states(out, "states.csv", data.times, states)
    out.json("report.json", _report(args, [cfg], model, T=data.T))
    return 0


def _fit(args, model, data):
    from ssmlab.estimation import fit_mle
    if args.backend == "particle":
        _need_seed(args, "the particle backend is stochastic")
    init = _load_json(args.init) if args.init else None
    return fit_mle(model, data, args.backend, init, **_fit_kw(args))


def _flag_convergence(fit):
    if not fit.converged:
        _warn("optimizer did not converge; results are flagged (converged=false)")


def cmd_fit(args, out):
    from ssmlab.diagnostics import smoothed_states
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    out.reserve("report.json", "states.csv")
    fit = _fit(args, model, data)
    _flag_convergence(fit)
    try:
        states = smoothed_states(model, data, fit.theta, fit.backend)
        _write_states(out, "states.csv", data.times, states)
    except SSMError:
        pass
    out.json("report.json", _report(args, [cfg], model, fit=fit.to_dict()))
    return 0


def cmd_profile(args, out):
    from ssmlab.estimation import profile_likelihood
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    out.reserve("report.json", "profile.csv")
    fit = _fit(args, model, data)
    _flag_convergence(fit)
    params = args.param or list(fit.names)
    curves = {}
    rows = []
    for p in params:
        c = profile_likelihood(model, data, fit, p, n_points=args.points, threshold=args.threshold,
                               workers=args.workers)
        curves[p] = c.to_dict()
        rows += [[p, g, l] for g, l in zip(c.grid, c.loglik)]
    write_table(out.path("profile.csv"), ["param", "value", "loglik"], rows)
    out.json("report.json", _report(args, [cfg], model, fit=fit.to_dict(), profiles=curves))
    return 0


def cmd_ident(args, out):
    from ssmlab.estimation import hessian_identifiability, profile_likelihood, simulation_estimability
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    out.reserve("report.json")
    fit = _fit(args, model, data)
    _flag_convergence(fit)
    body = {"fit": fit.to_dict()}
    try:
        body["hessian"] = hessian_identifiability(fit, args.rel_tol).to_dict()
    except SSMError as exc:
        body["hessian"] = {"error": str(exc)}
    body["profiles"] = {p: profile_likelihood(model, data, fit, p, n_points=args.points,
                                              threshold=args.threshold, workers=args.workers).to_dict()
                        for p in fit.names}
    if args.n_rep:
        _need_seed(args, "simulation estimability is stochastic")
        body["estimability"] = simulation_estimability(
            model, fit.theta, data.T, args.n_rep, fit.backend, args.seed, workers=args.workers).to_dict()
    out.json("report.json", _report(args, [cfg], model, **body))
    return 0


def _sample(args, model, data):
    from ssmlab import bayes
    priors = _priors(args, model)
    kw = dict(chains=args.chains, iters=args.iters, warmup=args.warmup, seed=args.seed, workers=args.workers)
    if args.sampler == "rw":
        backend = "auto" if args.backend == "particle" else args.backend
        return bayes.rw_metropolis(model, data, priors, backend, **kw)
    if args.sampler == "gibbs":
        return bayes.gibbs_ffbs(model, data, priors, **kw)
    return bayes.pmmh(model, data, priors, args.particles, store_states=True, **kw)


def cmd_mcmc(args, out):
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    out.reserve("report.json", "posterior.csv")
    s = _sample(args, model, data)
    s.to_csv(out.path("posterior.csv"))
    summ = s.summary()
    if not summ.get("converged", True):
        _warn("R-hat >= 1.1 for at least one parameter; chains flagged as not converged")
    out.json("report.json", _report(args, [cfg], model, posterior=summ))
    return 0


def cmd_clone(args, out):
    from ssmlab.bayes import data_cloning
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    out.reserve("report.json")
    K = [int(k) for k in args.K.split(",")]
    rep = data_cloning(model, data, _priors(args, model), K, backend=args.backend, chains=args.chains,
                       iters=args.iters, warmup=args.warmup, seed=args.seed, workers=args.workers)
    if not all(c is not False for c in rep.converged):
        _warn("the sampler did not converge for at least one K")
    body = rep.to_dict()
    body["verdict"] = {n: rep.verdict(n) for n in rep.names}
    out.json("report.json", _report(args, [cfg], model, cloning=body))
    return 0


def cmd_select(args, out):
    from ssmlab import selection as S
    if len(args.model) < 2:
        raise UsageError("select needs at least two --model configurations")
    data = _load_data(args.data)
    crits = [c.strip().lower() for c in args.criteria.split(",")]
    unknown = set(crits) - {"aic", "aicc", "aicb", "waic", "dic"}
    if unknown:
        raise UsageError(f"unknown criteria {sorted(unknown)}")
    if {"aicb", "waic", "dic"} & set(crits):
        _need_seed(args, "bootstrap and posterior criteria are stochastic")
    out.reserve("report.json", "comparison.csv")
    names, cfgs, values, details = [], [], {c: {} for c in crits}, {}
    for i, path in enumerate(args.model):
        model, cfg = _load_model(path)
        label = cfg.get("label", f"{Path(path).stem}")
        if label in names:
            label = f"{label}_{i}"
        names.append(label)
        cfgs.append(cfg)
        fit = _fit(args, model, data)
        _flag_convergence(fit)
        det = {"fit": fit.to_dict()}
        if "aic" in crits:
            values["aic"][label] = S.aic(fit)
        if "aicc" in crits:
            values["aicc"][label] = S.aicc(fit)
        if "aicb" in crits:
            r = S.aicb(model, data, fit, args.n_boot, args.seed, workers=args.workers)
            values["aicb"][label] = r.value
            det["aicb"] = r.to_dict()
        if {"waic", "dic"} & set(crits):
            from ssmlab.bayes import rw_metropolis
            s = rw_metropolis(model, data, _priors(args, model), fit.backend, args.chains, args.iters,
                              args.warmup, seed=args.seed, init=fit.theta, workers=args.workers)
            det["posterior"] = s.summary()
            if "waic" in crits:
                r = S.waic(s, model, data, "marginal", fit.backend)
                values["waic"][label] = r.value
                det["waic"] = {"value": r.value, "p_waic": r.p_eff}
            if "dic" in crits:
                r = S.dic(s, model, data, "marginal", fit.backend)
                values["dic"][label] = r.value
                det["dic"] = {"value": r.value, "p_d": r.p_eff}
        details[label] = det
    rows = []
    for c in crits:
        rows += S.compare(values[c], c.upper()).rows()
    with open(out.path("comparison.csv"), "w") as fh:
        fh.write("model,criterion,value,delta,weight\n")
        for r in rows:
            fh.write(f"{r['model']},{r['criterion']},{r['value']!r},{r['delta']!r},{r['weight']!r}\n")
    out.json("report.json", _report(args, cfgs, None, comparison=rows, details=details))
    return 0


def cmd_diagnose(args, out):
    from ssmlab import diagnostics as D
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    out.reserve("report.json", "residuals.csv", "ppc.csv")
    fit = _fit(args, model, data)
    _flag_convergence(fit)
    pkw = {"N": args.particles, "seed": args.seed, "grid_cells": args.grid_cells}
    raw, std = D.osa_residuals(model, data, fit.theta, fit.backend, **pkw)
    pit = D.pit_scores(model, data, fit.theta, fit.backend, **pkw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        q = D.quantile_residuals(pit)
    series = {"osa": raw, "standardized": std, "pit": pit, "quantile": q}
    try:
        series["response"] = D.response_residuals(model, data, fit.theta, backend=fit.backend)
    except SSMError:
        pass
    D.write_residuals(out.path("residuals.csv"), series)
    ppc = D.posterior_predictive_check(model, fit, data, args.statistic, n_rep=args.n_rep, seed=args.seed,
                                       workers=args.workers)
    write_table(out.path("ppc.csv"), ["replicate", "statistic"], list(enumerate(ppc.replicates)))
    summ = {k: s.summary(args.max_lag) for k, s in series.items()}
    alpha = args.alpha
    s_std = summ["standardized"]
    band = s_std.get("acf_band", math.inf)
    flags = {
        "residual_non_normality": s_std["ks_pvalue"] < alpha,
        "residual_autocorrelation": any(abs(a) > band for a in (s_std.get("acf") or [0, 0])[1:] if a is not None),
        "ppc_tail": not (alpha / 2 <= ppc.p_value <= 1 - alpha / 2),
    }
    for k, v in flags.items():
        if v:
            _warn(f"diagnostic flag raised: {k}")
    ppc_d = ppc.to_dict()
    ppc_d.pop("replicates")
    out.json("report.json", _report(args, [cfg], model, fit=fit.to_dict(), residuals=summ, ppc=ppc_d, flags=flags))
    return 0


def cmd_cv(args, out):
    from ssmlab.diagnostics import cross_validate
    model, cfg = _load_model(args.model[0])
    data = _load_data(args.data)
    if args.backend == "particle":
        _need_seed(args, "the particle backend is stochastic")
    out.reserve("report.json", "cv.csv")
    res = cross_validate(model, data, args.scheme, t0=args.t0, refit_every=args.refit_every, k=args.k,
                         backend=args.backend, workers=args.workers, **_fit_kw(args))
    header = ["time"] + [f"pred{j + 1}" for j in range(data.obs_dim)]
    write_table(out.path("cv.csv"), header, [[t, *row] for t, row in zip(data.times, res.predictions)])
    out.json("report.json", _report(args, [cfg], model, cv=res.to_dict()))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmlab", description="State-space model fitting and diagnostics.")
    p.add_argument("--version", action="version", version=f"ssmlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--model", action="append", required=True, help="model configuration JSON")
        if data:
            sp.add_argument("--data", help="observations CSV")
        sp.add_argument("--output-dir", required=True)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--backend", default="auto",
                        choices=["auto", "kalman", "laplace", "grid", "particle", "hmm"])
        sp.add_argument("--particles", type=int, default=1000)
        sp.add_argument("--grid-cells", type=int, default=400)
        sp.add_argument("--init", help="JSON file of starting parameter values")

    def mcmc_opts(sp):
        sp.add_argument("--chains", type=int, default=4)
        sp.add_argument("--iters", type=int, default=4000)
        sp.add_argument("--warmup", type=int)
        sp.add_argument("--priors", help="prior specification JSON")

    sp = sub.add_parser("simulate", help="simulate states and observations")
    common(sp, data=False)
    sp.add_argument("--T", type=int)
    sp.add_argument("--times", help="CSV whose times, covariates and missing pattern are reused")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="maximum likelihood fit")
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("profile", help="profile likelihood curves")
    common(sp)
    sp.add_argument("--param", action="append")
    sp.add_argument("--points", type=int, default=21)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("ident", help="identifiability diagnostics")
    common(sp)
    sp.add_argument("--rel-tol", type=float, default=1e-6)
    sp.add_argument("--points", type=int, default=21)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--n-rep", type=int, default=0, help="simulation-estimability replicates (0: skip)")
    sp.set_defaults(func=cmd_ident)

    sp = sub.add_parser("mcmc", help="posterior sampling")
    common(sp)
    mcmc_opts(sp)
    sp.add_argument("--sampler", choices=["rw", "gibbs", "pmmh"], default="rw")
    sp.set_defaults(func=cmd_mcmc)

    sp = sub.add_parser("clone", help="data cloning")
    common(sp)
    mcmc_opts(sp)
    sp.add_argument("--K", default="1,4,16")
    sp.set_defaults(func=cmd_clone)

    sp = sub.add_parser("select", help="compare models by information criteria")
    common(sp)
    mcmc_opts(sp)
    sp.add_argument("--criteria", default="aic,aicc")
    sp.add_argument("--n-boot", type=int, default=100)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("diagnose", help="residuals and predictive checks")
    common(sp)
    sp.add_argument("--statistic", default="sd", choices=["mean", "sd", "ssr"])
    sp.add_argument("--n-rep", type=int, default=200)
    sp.add_argument("--max-lag", type=int, default=10)
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("cv", help="cross-validation")
    common(sp)
    sp.add_argument("--scheme", choices=["rolling", "block"], default="rolling")
    sp.add_argument("--t0", type=int, default=10)
    sp.add_argument("--refit-every", type=int, default=1)
    sp.add_argument("--k", type=int, default=5)
    sp.set_defaults(func=cmd_cv)
    return p


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, DataError):
        return 2
    if isinstance(exc, NumericalError):
        return 3
    return 1


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        if args.command in STOCHASTIC:
            _need_seed(args, f"'{args.command}' is stochastic")
        return args.func(args, Outputs(args.output_dir, args.force))
    except SSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
