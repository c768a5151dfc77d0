import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from ssmlab import zoo
from ssmlab.bayes import (
    Prior, PriorSpec, acceptance_probability, data_cloning, default_priors, effective_sample_size,
    gelman_rubin, gibbs_ffbs, metropolis, pmmh, rw_metropolis, split_rhat,
)
from ssmlab.core import TimeSeriesData, draw_seed, make_rng, simulate
from ssmlab.errors import ConfigurationError, UnsupportedModelError
from ssmlab.kalman import kalman_filter, kalman_smoother

PRIORS = {"sigma_p": ("half_normal", 1.0), "sigma_o": ("half_normal", 1.0)}


def _times(T):
    return np.arange(1, T + 1, dtype=float)


# ---------------------------------------------------------------- priors

@pytest.mark.parametrize("prior, ref", [
    (Prior("normal", 1.0, 2.0), stats.norm(1.0, 2.0)),
    (Prior("uniform", -1.0, 3.0), stats.uniform(-1.0, 4.0)),
    (Prior("half_normal", 0.7), stats.halfnorm(scale=0.7)),
    (Prior("gamma", 2.5, 3.0), stats.gamma(2.5, scale=1 / 3.0)),
])
def test_prior_densities_match_scipy(prior, ref):
    for x in (0.05, 0.4, 1.3, 2.9):
        assert prior.logpdf(x) == pytest.approx(ref.logpdf(x), rel=1e-12)
    assert prior.logpdf(-0.5) == pytest.approx(ref.logpdf(-0.5)) or not np.isfinite(ref.logpdf(-0.5))


def test_prior_parsing_and_validation():
    assert Prior.parse({"family": "gamma", "shape": 2, "rate": 1}) == Prior("gamma", 2.0, 1.0)
    assert Prior.parse(("normal", 0, 1)) == Prior("normal", 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        Prior("cauchy", 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        Prior("uniform", 2.0, 1.0)
    with pytest.raises(ConfigurationError):
        PriorSpec.build({"sigma_p": ("half_normal", 1)}).check(zoo.make_ndlm(fixed=["alpha", "beta", "z0"]))


def test_default_priors_cover_free_parameters():
    m = zoo.make_cjs(phi=0.7, p=0.4)
    pr = default_priors(m)
    assert pr.priors["phi"] == Prior("uniform", 0.0, 1.0)
    pr.check(m)


# ---------------------------------------------------------------- MH mechanics

def test_flat_prior_acceptance_is_likelihood_ratio():
    assert acceptance_probability(math.log(0.2), math.log(0.1)) == pytest.approx(0.5)
    assert acceptance_probability(math.log(0.1), math.log(0.2)) == 1.0
    assert acceptance_probability(0.0, -math.inf) == 0.0


def test_detailed_balance_on_piecewise_constant_target():
    # three unit intervals with masses 0.2, 0.5, 0.3
    mass = np.array([0.2, 0.5, 0.3])

    def logp(x):
        k = math.floor(x[0])
        return math.log(mass[k]) if 0 <= k < 3 else -math.inf

    chain, _ = metropolis(logp, [1.5], 1_000_000, 1.0, seed=3)
    cells = np.floor(chain[:, 0]).astype(int)
    freq = np.bincount(cells, minlength=3) / cells.size
    ind = cells[:, None] == np.arange(3)
    ess = np.array([effective_sample_size(ind[:, j].astype(float)[None]) for j in range(3)])
    se = np.sqrt(mass * (1 - mass) / ess)
    assert np.all(np.abs(freq - mass) < 3 * se)


def test_vanishing_proposal_accepts_everything(toy, toy50):
    s = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=2, iters=400, proposal_sds=[1e-8, 1e-8],
                      adapt=False, seed=1)
    assert np.all(s.acceptance > 0.95)
    assert np.ptp(s.draws, axis=1).max() < 1e-5


def test_zero_prior_mass_at_start_is_an_error(toy, toy50):
    with pytest.raises(ConfigurationError):
        rw_metropolis(toy, toy50, {"sigma_p": ("uniform", 1.0, 2.0), "sigma_o": ("half_normal", 1.0)},
                      "kalman", chains=2, iters=100)


def test_particle_backend_rejected_for_exact_mh(toy, toy50):
    with pytest.raises(ConfigurationError):
        rw_metropolis(toy, toy50, PRIORS, "particle", chains=2, iters=100)


def test_ordering_constraint_is_respected(toy, toy50):
    s = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=2, iters=600, seed=2, ordering=("sigma_p", "sigma_o"),
                      init={"sigma_p": 0.05, "sigma_o": 0.2}, init_spread=0.0)
    assert np.all(s.param("sigma_p") <= s.param("sigma_o"))


# ---------------------------------------------------------------- R-hat and ESS

def test_rhat_identical_chains():
    x = np.random.default_rng(0).normal(size=200)
    n = 200
    assert split_rhat(np.stack([x, x]), split=False) == pytest.approx(math.sqrt((n - 1) / n), abs=1e-12)
    assert split_rhat(np.ones((2, 50))) == 1.0


def test_rhat_separated_chains():
    rng = np.random.default_rng(1)
    x = np.stack([rng.normal(0, 1, 500), rng.normal(10, 1, 500)])
    assert gelman_rubin(x).rhat["x0"] > 1.1
    assert not gelman_rubin(x).converged


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-1e3, 1e3))
def test_rhat_shift_invariant(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 60))
    assert split_rhat(x + c) == pytest.approx(split_rhat(x), rel=1e-6)


def test_rhat_needs_two_chains():
    with pytest.raises(ConfigurationError):
        split_rhat(np.zeros((1, 100)))


def test_ess_of_iid_and_correlated_draws():
    rng = np.random.default_rng(2)
    iid = rng.normal(size=(4, 2000))
    assert 0.8 * 8000 < effective_sample_size(iid) < 1.2 * 8000
    ar = np.zeros((4, 2000))
    for t in range(1, 2000):
        ar[:, t] = 0.9 * ar[:, t - 1] + rng.normal(size=4)
    # AR(1) with rho=0.9 has integrated time (1 + rho)/(1 - rho) = 19
    assert 8000 / 30 < effective_sample_size(ar) < 8000 / 12


# ---------------------------------------------------------------- samplers on the toy model

@pytest.mark.slow
def test_rw_metropolis_matches_long_reference(toy, toy50):
    s = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=4, iters=10_000, seed=4)
    ref = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=4, iters=40_000, seed=99)
    assert gelman_rubin(s).converged
    se = math.hypot(s.mc_se()["sigma_p"], ref.mc_se()["sigma_p"])
    assert abs(s.mean()["sigma_p"] - ref.mean()["sigma_p"]) < 3 * se


def test_samples_export(tmp_path, toy, toy50):
    s = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=2, iters=200, seed=0)
    s.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "chain,draw,sigma_p,sigma_o,logpost"
    assert len(lines) == 1 + 2 * 100
    s.to_json(tmp_path / "p.json")
    summ = json.loads((tmp_path / "p.json").read_text())
    assert {"mean", "rhat", "acceptance", "quantiles"} <= set(summ)


def test_results_do_not_depend_on_worker_count(toy, toy50):
    a = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=3, iters=200, seed=5, workers=1)
    b = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=3, iters=200, seed=5, workers=3)
    np.testing.assert_array_equal(a.draws, b.draws)


def test_gibbs_degenerate_states():
    m = zoo.make_ndlm(sigma_p=0.0, sigma_o=0.3, z0=1.0, fixed=["alpha", "beta", "z0"])
    _, data = simulate(m, None, _times(30), seed=1)
    s = gibbs_ffbs(m, data, {"sigma_o": ("half_normal", 1.0)}, chains=2, iters=300, seed=0)
    np.testing.assert_allclose(s.states, 1.0)
    assert abs(s.mean()["sigma_o"] - np.std(data.y - 1.0)) < 0.1


@pytest.mark.slow
def test_gibbs_state_means_match_marginal_sampler(toy, toy50):
    g = gibbs_ffbs(toy, toy50, PRIORS, chains=4, iters=3000, seed=1)
    r = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=4, iters=3000, seed=1)
    # composition: average smoother means over marginal parameter draws
    thetas = r.draws.reshape(-1, 2)[::10]
    comp = np.mean([kalman_smoother(kalman_filter(toy, toy50, {"sigma_p": a, "sigma_o": b})).mean[:, 0]
                    for a, b in thetas], axis=0)
    gm = g.states[..., 1:, 0].reshape(-1, toy50.T).mean(axis=0)
    per_t = g.states[..., 1:, 0].reshape(-1, toy50.T)
    se = per_t.std(axis=0) / math.sqrt(effective_sample_size(g.states[..., 25, 0]))
    assert np.mean(np.abs(gm - comp) < 4 * se) > 0.9
    ac = g.state_autocorrelation()
    assert ac is not None and -1 <= ac <= 1


def test_gibbs_requires_linear_gaussian():
    with pytest.raises(UnsupportedModelError):
        gibbs_ffbs(zoo.make_logistic(), TimeSeriesData(times=[1.0, 2.0], y=[1.0, 2.0]), iters=20)


def test_pmmh_reproducible(toy, toy50):
    kw = dict(N=100, chains=2, iters=150, seed=7)
    a = pmmh(toy, toy50, PRIORS, **kw)
    b = pmmh(toy, toy50, PRIORS, **kw)
    np.testing.assert_array_equal(a.draws, b.draws)


def test_pmmh_single_particle_completes(toy, toy50):
    with pytest.warns(RuntimeWarning, match="fewer than 5%"):
        s = pmmh(toy, toy50, PRIORS, N=1, chains=2, iters=300, seed=1)
    assert s.acceptance.max() < 0.05
    assert s.warnings


def test_pmmh_stores_trajectories(toy, toy50):
    s = pmmh(toy, toy50, PRIORS, N=100, chains=2, iters=100, seed=2, store_states=True)
    assert s.states.shape == (2, 50, toy50.T + 1, 1)


# ---------------------------------------------------------------- data cloning

def test_cloning_k1_is_plain_posterior(toy, toy50):
    rep = data_cloning(toy, toy50, PRIORS, K_list=(1,), backend="kalman", chains=2, iters=300, seed=3)
    s = rw_metropolis(toy, toy50, PRIORS, "kalman", chains=2, iters=300, seed=draw_seed(make_rng(3, 5, 1)))
    assert rep.variance["sigma_p"][0] == s.var()["sigma_p"]


@pytest.mark.slow
def test_cloning_identifiable_variance_shrinks(toy, toy_data):
    rep = data_cloning(toy, toy_data, PRIORS, K_list=(1, 4, 16), backend="kalman", chains=4, iters=4000, seed=1)
    r = rep.ratio["sigma_p"]
    assert 1 / 32 < r < 2 / 16
    assert rep.verdict("sigma_p") == "identifiable"


def test_cloning_rejects_bad_k(toy, toy50):
    with pytest.raises(ConfigurationError):
        data_cloning(toy, toy50, PRIORS, K_list=(4, 1))
