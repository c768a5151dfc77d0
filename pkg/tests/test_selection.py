import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ssmlab import estimation, selection
from ssmlab.bayes import PosteriorSamples, gibbs_ffbs, rw_metropolis
from ssmlab.core import simulate
from ssmlab.errors import ConfigurationError, DomainError
from ssmlab.estimation import LikelihoodEvaluator, fit_mle
from ssmlab.kalman import kalman_filter
from ssmlab.selection import (
    aic, aicb, aicc, akaike_weights, compare, dic, pointwise_loglik, waic, waic_from_pointwise,
)

PRIORS = {"sigma_p": ("half_normal", 1.0), "sigma_o": ("half_normal", 1.0)}


def _point_mass(theta, names, n=20, states=None):
    draws = np.tile([theta[k] for k in names], (2, n, 1)).astype(float)
    st_ = None if states is None else np.broadcast_to(states, (2, n) + states.shape).copy()
    return PosteriorSamples(tuple(names), draws, np.zeros((2, n)), np.ones(2), 0, "test", st_)


def test_aic_direct_formula():
    assert aic(-10.0, k=3) == 26.0
    assert aic(-10.0, k=0) == 20.0


def test_aicc_limit_and_domain():
    assert abs(aicc(-10.0, T=10**6, k=3) - aic(-10.0, k=3)) < 1e-3
    with pytest.raises(DomainError):
        aicc(-10.0, T=4, k=3)


def test_aic_from_fit(toy, toy_data):
    fit = fit_mle(toy, toy_data, "kalman", compute_hessian=False)
    assert aic(fit) == pytest.approx(-2 * fit.loglik + 4)
    assert aicc(fit) == pytest.approx(aic(fit) + 2 * 2 * 3 / (100 - 3))


def test_akaike_weights_examples():
    np.testing.assert_allclose(akaike_weights([5.0, 5.0]), [0.5, 0.5])
    np.testing.assert_allclose(akaike_weights([0.0, 2.0]), [0.7310586, 0.2689414], atol=1e-7)
    w = akaike_weights([0.0, 200.0])
    assert abs(w[0] - 1) < 1e-40 and w[1] < 1e-40


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6), st.randoms())
def test_comparison_is_order_invariant(vals, rnd):
    names = [f"m{i}" for i in range(len(vals))]
    perm = list(range(len(vals)))
    rnd.shuffle(perm)
    a = compare(dict(zip(names, vals)))
    b = compare({names[i]: vals[i] for i in perm})
    wa = dict(zip(a.models, a.weights))
    wb = dict(zip(b.models, b.weights))
    for n in names:
        assert wa[n] == pytest.approx(wb[n], rel=1e-12, abs=1e-300)
    assert a.values[list(a.models).index(a.best)] == b.values[list(b.models).index(b.best)]


def test_comparison_table_export(tmp_path):
    tab = compare({"a": 10.0, "b": 12.0})
    tab.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "model,criterion,value,delta,weight"
    assert lines[2].startswith("b,AIC,12")
    tab.to_json(tmp_path / "t.json")
    rows = json.loads((tmp_path / "t.json").read_text())
    assert rows[1]["delta"] == 2.0
    with pytest.raises(ConfigurationError):
        compare({"a": 1.0})


# ---------------------------------------------------------------- WAIC and DIC

def test_waic_brute_force_iid_normal():
    y = np.array([0.3, -1.1, 2.0])
    mus = np.array([0.1, 0.6])
    L = stats.norm.logpdf(y[None, :], mus[:, None], 1.0)
    lppd = sum(math.log(0.5 * (math.exp(L[0, i]) + math.exp(L[1, i]))) for i in range(3))
    pw = sum((L[0, i] - L[1, i]) ** 2 / 2 for i in range(3))  # sample variance of two values
    value, p, contrib = waic_from_pointwise(L)
    assert value == pytest.approx(-2 * (lppd - pw), abs=1e-10)
    assert p == pytest.approx(pw, abs=1e-10)
    assert contrib.sum() == pytest.approx(value, abs=1e-12)


def test_waic_needs_two_draws():
    with pytest.raises(ConfigurationError):
        waic_from_pointwise(np.zeros((1, 3)))


def test_waic_and_dic_point_mass(toy, toy50):
    theta = {"sigma_p": 0.12, "sigma_o": 0.09}
    s = _point_mass(theta, ("sigma_p", "sigma_o"))
    ll = kalman_filter(toy, toy50, theta).loglik
    w = waic(s, toy, toy50, backend="kalman")
    assert w.p_eff == pytest.approx(0.0, abs=1e-20)
    assert w.value == pytest.approx(-2 * ll, rel=1e-12)
    d = dic(s, toy, toy50, backend="kalman")
    assert abs(d.p_eff) < 1e-9
    assert d.value == pytest.approx(-2 * ll, rel=1e-10)


def test_conditional_point_mass(toy, toy50):
    theta = {"sigma_p": 0.12, "sigma_o": 0.09}
    states = np.zeros((toy50.T + 1, 1))
    states[1:, 0] = toy50.y[:, 0] + 0.01
    s = _point_mass(theta, ("sigma_p", "sigma_o"), states=states)
    d = dic(s, toy, toy50, mode="conditional")
    g = stats.norm.logpdf(toy50.y[:, 0], states[1:, 0], 0.09).sum()
    assert abs(d.p_eff) < 1e-9
    assert d.value == pytest.approx(-2 * g, rel=1e-10)
    w = waic(s, toy, toy50, mode="conditional")
    assert w.value == pytest.approx(-2 * g, rel=1e-10)


def test_conditional_mode_needs_states(toy, toy50):
    s = _point_mass({"sigma_p": 0.1, "sigma_o": 0.1}, ("sigma_p", "sigma_o"))
    with pytest.raises(ConfigurationError):
        waic(s, toy, toy50, mode="conditional")


def test_marginal_terms_obey_chain_rule(toy, toy50):
    s = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=2, iters=200, seed=0)
    L = pointwise_loglik(s, toy, toy50, backend="kalman", max_draws=25)
    ev = LikelihoodEvaluator(toy, toy50, "kalman")
    flat = s.draws.reshape(-1, 2)
    idx = np.round(np.linspace(0, flat.shape[0] - 1, 25)).astype(int)
    for row, i in zip(L, idx):
        assert row.sum() == pytest.approx(ev(toy.theta(dict(zip(s.names, flat[i])))), abs=1e-8)


def test_dic_runs_agree_within_mc_error(toy, toy50):
    a = dic(rw_metropolis(toy, toy50, PRIORS, "kalman", chains=4, iters=2000, seed=1), toy, toy50, backend="kalman")
    b = dic(rw_metropolis(toy, toy50, PRIORS, "kalman", chains=4, iters=2000, seed=2), toy, toy50, backend="kalman")
    assert abs(a.value - b.value) < 1.0


def test_marginal_and_conditional_dic_differ(toy, toy50):
    s = gibbs_ffbs(toy, toy50, PRIORS, chains=2, iters=600, seed=3)
    assert abs(dic(s, toy, toy50).value - dic(s, toy, toy50, mode="conditional").value) > 1.0


# ---------------------------------------------------------------- AICb

def test_aicb_degenerate_replicate(monkeypatch, toy, toy50):
    fit = fit_mle(toy, toy50, "kalman", compute_hessian=False)
    monkeypatch.setattr(estimation, "fit_mle", lambda *a, **k: fit)
    res = aicb(toy, toy50, fit, N_boot=1)
    assert res.penalty == 0.0
    assert res.value == pytest.approx(-2 * fit.loglik)


def test_aicb_penalty_nonnegative(toy, toy50):
    fit = fit_mle(toy, toy50, "kalman", compute_hessian=False)
    res = aicb(toy, toy50, fit, N_boot=10, seed=1)
    assert res.penalty >= 0
    assert np.all(res.terms >= -1e-6)
    assert res.n_failed == 0


def test_aicb_reproducible_across_workers(toy, toy50):
    fit = fit_mle(toy, toy50, "kalman", compute_hessian=False)
    a = aicb(toy, toy50, fit, N_boot=6, seed=2, workers=1)
    b = aicb(toy, toy50, fit, N_boot=6, seed=2, workers=3)
    np.testing.assert_array_equal(a.terms, b.terms)
