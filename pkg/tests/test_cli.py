import json
import subprocess
import sys

import numpy as np
import pytest

from ssmlab import __version__
from ssmlab.cli import run
from ssmlab.core import read_csv

TOY = {"model": "ndlm", "params": {"alpha": 1, "beta": 1, "sigma_p": 0.1, "sigma_o": 0.1, "z0": 0},
       "fixed": ["alpha", "beta", "z0"]}
MISSPEC = {"model": "ndlm", "label": "misspecified",
           "params": {"alpha": 1, "beta": 1, "sigma_p": 0.1, "sigma_o": 0.5, "z0": 0},
           "fixed": ["alpha", "beta", "z0", "sigma_o"]}


@pytest.fixture
def ws(tmp_path):
    (tmp_path / "toy.json").write_text(json.dumps(TOY))
    (tmp_path / "mis.json").write_text(json.dumps(MISSPEC))
    assert run(["simulate", "--model", str(tmp_path / "toy.json"), "--T", "100", "--seed", "7",
                "--output-dir", str(tmp_path / "sim")]) == 0
    return tmp_path


def _args(ws, cmd, out, *extra, model="toy.json"):
    return [cmd, "--model", str(ws / model), "--data", str(ws / "sim" / "data.csv"),
            "--output-dir", str(ws / out), *extra]


def _report(ws, out):
    return json.loads((ws / out / "report.json").read_text())


def test_simulate_is_byte_identical(ws):
    assert run(["simulate", "--model", str(ws / "toy.json"), "--T", "100", "--seed", "7",
                "--output-dir", str(ws / "sim2")]) == 0
    for f in ("data.csv", "states.csv"):
        assert (ws / "sim" / f).read_bytes() == (ws / "sim2" / f).read_bytes()
    rep = _report(ws, "sim")
    assert rep["version"] == __version__ and rep["seed"] == 7 and rep["config"]["T"] == 100
    assert read_csv(ws / "sim" / "data.csv").T == 100


def test_outputs_are_not_overwritten_without_force(ws, capsys):
    argv = ["simulate", "--model", str(ws / "toy.json"), "--T", "10", "--seed", "1", "--output-dir", str(ws / "sim")]
    assert run(argv) == 1
    assert "--force" in capsys.readouterr().err
    assert run(argv + ["--force"]) == 0


def test_exit_codes(ws, capsys):
    assert run(["simulate", "--model", str(ws / "toy.json"), "--T", "10", "--output-dir", str(ws / "x")]) == 1
    assert run(["bogus"]) == 1
    (ws / "bad.csv").write_text("time,y1\n1,0.0\n2,abc\n")
    assert run(["fit", "--model", str(ws / "toy.json"), "--data", str(ws / "bad.csv"),
                "--output-dir", str(ws / "y")]) == 2
    (ws / "unknown.json").write_text(json.dumps({"model": "nope"}))
    assert run(_args(ws, "fit", "z", model="unknown.json")) == 1
    under = {"model": "ndlm", "params": {"sigma_p": 0.0, "sigma_o": 1e-200},
             "fixed": ["alpha", "beta", "z0", "sigma_p", "sigma_o"]}
    (ws / "under.json").write_text(json.dumps(under))
    assert run(_args(ws, "fit", "w", "--backend", "kalman", model="under.json")) == 3
    err = capsys.readouterr().err
    assert all(line.startswith(("error:", "usage:", "ssmlab:", " ")) for line in err.splitlines() if line)


def test_entry_point_subprocess(ws):
    r = subprocess.run([sys.executable, "-m", "ssmlab.cli", "fit", "--model", str(ws / "toy.json"),
                        "--data", str(ws / "nope.csv"), "--output-dir", str(ws / "e")],
                       capture_output=True, text=True)
    assert r.returncode == 2
    assert len(r.stderr.strip().splitlines()) == 1


def test_fit_backends_agree(ws):
    assert run(_args(ws, "fit", "fk", "--backend", "kalman")) == 0
    assert run(_args(ws, "fit", "fg", "--backend", "grid")) == 0
    a, b = _report(ws, "fk")["fit"], _report(ws, "fg")["fit"]
    for k in ("sigma_p", "sigma_o"):
        assert abs(a["theta"][k] - b["theta"][k]) < 1e-3
    assert (ws / "fk" / "states.csv").exists()


def test_profile_and_ident(ws):
    assert run(_args(ws, "profile", "p", "--param", "sigma_o", "--points", "7")) == 0
    assert set(_report(ws, "p")["profiles"]) == {"sigma_o"}
    assert run(_args(ws, "ident", "i", "--points", "5")) == 0
    assert _report(ws, "i")["hessian"]["verdict"] == "clear"


def test_mcmc_reproducible_across_workers(ws):
    assert run(_args(ws, "mcmc", "m1", "--seed", "3", "--chains", "2", "--iters", "400", "--workers", "1")) == 0
    assert run(_args(ws, "mcmc", "m2", "--seed", "3", "--chains", "2", "--iters", "400", "--workers", "2")) == 0
    assert (ws / "m1" / "posterior.csv").read_bytes() == (ws / "m2" / "posterior.csv").read_bytes()
    assert run(_args(ws, "mcmc", "m3", "--seed", "3", "--chains", "2", "--iters", "100", "--sampler", "gibbs")) == 0


def test_clone(ws):
    assert run(_args(ws, "clone", "c", "--seed", "1", "--chains", "2", "--iters", "400", "--K", "1,4")) == 0
    assert _report(ws, "c")["cloning"]["K"] == [1, 4]


def test_select_writes_comparison(ws):
    argv = _args(ws, "select", "s", "--model", str(ws / "mis.json"), "--criteria", "aic,waic",
                 "--seed", "2", "--chains", "2", "--iters", "400")
    assert run(argv) == 0
    lines = (ws / "s" / "comparison.csv").read_text().splitlines()
    assert lines[0] == "model,criterion,value,delta,weight" and len(lines) == 5
    rows = _report(ws, "s")["comparison"]
    best = {r["criterion"]: r["model"] for r in rows if r["delta"] == 0}
    assert best == {"AIC": "toy", "WAIC": "toy"}


def test_select_needs_two_models(ws):
    assert run(_args(ws, "select", "s1")) == 1


def test_diagnose_flags_misspecification(ws, capsys):
    assert run(_args(ws, "diagnose", "d", "--seed", "1", "--n-rep", "50", model="mis.json")) == 0
    flags = _report(ws, "d")["flags"]
    assert flags["residual_non_normality"]
    assert "diagnostic flag raised" in capsys.readouterr().err
    header = (ws / "d" / "residuals.csv").read_text().splitlines()[0]
    assert header == "time,osa,standardized,pit,quantile,response"


def test_cv(ws):
    assert run(_args(ws, "cv", "v", "--scheme", "block", "--k", "4")) == 0
    assert len(_report(ws, "v")["cv"]["fold_mspe"]) == 4
