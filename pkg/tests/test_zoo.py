import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from ssmlab import zoo
from ssmlab.core import TimeSeriesData, joint_log_likelihood, make_rng, simulate
from ssmlab.discretized import grid_loglik, hmm_loglik
from ssmlab.errors import ConfigurationError, DataError, DomainError
from ssmlab.kalman import kalman_loglik


def _times(T):
    return np.arange(1, T + 1, dtype=float)


# ---------------------------------------------------------------- NDLM

def test_ndlm_rejects_two_zero_scales():
    with pytest.raises(ConfigurationError):
        zoo.make_ndlm(sigma_p=0, sigma_o=0)
    with pytest.raises(DomainError):
        zoo.make_ndlm(sigma_p=-1)


def test_ndlm_linear_gaussian_coefficients():
    m = zoo.make_ndlm(alpha=2.0, beta=0.5)
    sd = m.prepare(TimeSeriesData.empty(_times(3)))
    coef = m.linear_gaussian(sd, m.theta())
    assert coef.F[0, 0, 0] == 0.5
    assert coef.H[0, 0, 0] == 2.0


def test_ndlm_beta_zero_gives_iid_states():
    m = zoo.make_ndlm(beta=0.0, sigma_p=0.7, sigma_o=0.1)
    states, _ = simulate(m, None, _times(10_000), seed=1)
    z = states[:, 0]
    assert abs(z.mean()) < 3 * 0.7 / 100
    assert abs(z.std() - 0.7) < 0.03
    assert abs(np.corrcoef(z[1:], z[:-1])[0, 1]) < 0.03


def test_ndlm_process_density_matches_scipy():
    m = zoo.make_ndlm(alpha=1.3, beta=0.7, sigma_p=0.4, sigma_o=0.2)
    sd = m.prepare(TimeSeriesData(times=_times(1), y=[0.5]))
    th = m.theta()
    z_prev = np.array([[0.3]])
    z = np.array([[-0.1]])
    assert m.process_logpdf(sd, 0, z, z_prev, th)[0] == pytest.approx(stats.norm.logpdf(-0.1, 0.21, 0.4))
    assert m.obs_logpdf(sd, 0, z, th)[0] == pytest.approx(stats.norm.logpdf(0.5, -0.13, 0.2))


# ---------------------------------------------------------------- logistic

def test_logistic_pure_growth_without_noise():
    m = zoo.make_logistic(beta0=0.1, beta1=0.0, sigma_p=0.1, sigma_o=1.0, z0=2.0,
                          fixed=["sigma_p", "sigma_o"])
    states, _ = simulate(m, {"sigma_p": 0.0}, _times(10), seed=0)
    np.testing.assert_allclose(states[:, 0], 2.0 * np.exp(0.1 * _times(10)), rtol=1e-12)


def test_logistic_equilibrium_is_fixed_point():
    m = zoo.make_logistic(beta0=0.5, beta1=-0.01, z0=50.0, fixed=["sigma_p"])
    states, _ = simulate(m, {"sigma_p": 0.0}, _times(5), seed=0)
    np.testing.assert_allclose(states[:, 0], 50.0, rtol=1e-12)


def test_logistic_rejects_positive_beta1():
    with pytest.raises(DomainError):
        zoo.make_logistic(beta1=0.1)


def test_logistic_scales_agree_with_matched_noise():
    a = zoo.make_logistic(beta0=0.3, beta1=-0.02, z0=5.0)
    b = zoo.make_logistic(beta0=0.3, beta1=-0.02, z0=5.0, scale="log-state")
    sa, da = simulate(a, None, _times(30), seed=4)
    sb, db = simulate(b, None, _times(30), seed=4)
    np.testing.assert_allclose(sa[:, 0], np.exp(sb[:, 0]), rtol=1e-10)
    np.testing.assert_allclose(da.y, db.y, rtol=1e-10)


# ---------------------------------------------------------------- Gompertz

def test_gompertz_beta1_minus_one_is_iid():
    m = zoo.make_gompertz(beta0=1.5, beta1=-1.0, sigma_p=0.3, sigma_o=0.1)
    states, _ = simulate(m, None, _times(5000), seed=2)
    assert abs(states[:, 0].mean() - 1.5) < 3 * 0.3 / math.sqrt(5000)


def test_gompertz_raw_matches_linearized_after_change_of_variables():
    lin = zoo.make_gompertz(beta0=0.8, beta1=-0.4, sigma_p=0.2, sigma_o=0.15, init=1.0)
    raw = zoo.make_gompertz(beta0=0.8, beta1=-0.4, sigma_p=0.2, sigma_o=0.15, init=math.e, form="raw")
    _, dlin = simulate(lin, None, _times(15), seed=3)
    draw = dlin.with_y(np.exp(dlin.y))
    ll_lin = kalman_loglik(lin, dlin)
    ll_raw = grid_loglik(raw, draw, m=2000)
    # density of y = exp(g) picks up the Jacobian -sum(g)
    assert ll_raw == pytest.approx(ll_lin - dlin.y.sum(), abs=1e-4)


def test_gompertz_zero_covariate_effect():
    p = np.linspace(-1, 1, 20)
    base = zoo.make_gompertz(beta0=0.5, beta1=-0.3)
    cov = zoo.make_gompertz(beta0=0.5, beta1=-0.3, covariate="p", beta2=0.0)
    _, d = simulate(base, None, _times(20), seed=1, covariates={"p": p})
    assert kalman_loglik(cov, d) == pytest.approx(kalman_loglik(base, d), abs=1e-12)
    with pytest.raises(DataError):
        kalman_loglik(cov, TimeSeriesData(times=d.times, y=d.y))


# ---------------------------------------------------------------- DCRW

def _dcrw(**kw):
    return zoo.make_dcrw(error_table=zoo.DcrwErrorTable.single(0.5, 5.0), grid_interval=1.0, **kw)


def test_dcrw_gamma_zero_is_random_walk():
    m = _dcrw(gamma=0.0)
    z_prev = np.array([[1.0, 2.0, 7.0, -3.0]])
    np.testing.assert_allclose(m._mean(z_prev, m.theta()), [[1.0, 2.0]])
    states, _ = simulate(m, None, _times(10_000), seed=5)
    d = np.diff(states[:, 0])
    assert abs(np.corrcoef(d[1:], d[:-1])[0, 1]) < 3 / math.sqrt(d.size)


def test_dcrw_gamma_one_without_noise_is_straight_line():
    m = zoo.make_dcrw(gamma=1.0, error_table=zoo.DcrwErrorTable.single(), grid_interval=1.0, v0=(0.5, -1.0),
                      fixed=["rho", "psi_lon", "psi_lat", "x0_lon", "x0_lat", "v0_lon", "v0_lat",
                             "sigma_lon", "sigma_lat"])
    z = m.sample_initial(m.theta(), 1, make_rng(0))
    sd = m.prepare(TimeSeriesData.empty(_times(5), obs_dim=2))
    th = dict(m.theta(), sigma_lon=0.0, sigma_lat=0.0)
    for t in range(5):
        z = m.process_sample(sd, t, z, th, make_rng(t))
        np.testing.assert_allclose(z[0, :2], [(t + 1) * 0.5, -(t + 1) * 1.0])


def test_dcrw_augmented_state_reproduces_second_order_recursion():
    m = _dcrw(gamma=0.6, sigma_lon=0.3, sigma_lat=0.2)
    states, _ = simulate(m, None, _times(50), seed=9)
    np.testing.assert_array_equal(states[1:, 2:], states[:-1, :2])


def test_dcrw_observation_at_grid_point_uses_t_density():
    m = _dcrw(gamma=0.3, psi_lon=2.0, fixed=["rho", "psi_lat", "x0_lon", "x0_lat", "v0_lon", "v0_lat"])
    data = TimeSeriesData(times=[0.0, 1.0], y=[[0.1, 0.2], [0.4, -0.3]])
    sd = m.prepare(data)
    z = np.array([[0.5, -0.5, 0.0, 0.0]])
    lp = m.obs_logpdf(sd, 0, z, m.theta())[0]
    # the record at the grid origin (fraction 0) sits on z_{t-1}, the other (fraction 1) on z_t
    expect = (stats.t.logpdf(0.1, 5.0, 0.0, 1.0) + stats.t.logpdf(0.2, 5.0, 0.0, 0.5)
              + stats.t.logpdf(0.4, 5.0, 0.5, 1.0) + stats.t.logpdf(-0.3, 5.0, -0.5, 0.5))
    assert lp == pytest.approx(expect, rel=1e-12)


def test_interpolation_index_fractions():
    ii = zoo.interpolation_index([0.0, 0.25, 1.0, 1.5, 3.0], 1.0)
    assert ii.step.tolist() == [1, 1, 1, 2, 3]
    np.testing.assert_allclose(ii.frac, [0.0, 0.25, 1.0, 0.5, 1.0])


def test_dcrw_unknown_quality_class():
    m = _dcrw()
    data = TimeSeriesData(times=[0.0, 1.0], y=[[0.0, 0.0], [1.0, 1.0]], quality=[1, 3])
    with pytest.raises(DataError):
        m.prepare(data)


# ---------------------------------------------------------------- OU-CRW

def test_oucrw_velocity_variance_closed_form():
    _, Q = zoo.oucrw_transition(1.0, 1.0, 1.0)
    assert Q[1, 1] == pytest.approx((1 - math.exp(-2)) / 2, abs=1e-12)
    assert Q[1, 1] == pytest.approx(0.432332, abs=1e-6)


def test_oucrw_limits():
    _, Q = zoo.oucrw_transition(1e4, 0.7, 1.3)
    assert Q[1, 1] == pytest.approx(1.3 ** 2 / (2 * 0.7))
    F, Q = zoo.oucrw_transition(1e-9, 0.7, 1.3)
    np.testing.assert_allclose(F, np.eye(2), atol=1e-8)
    np.testing.assert_allclose(Q, 0.0, atol=1e-8)
    with pytest.raises(DomainError):
        zoo.oucrw_transition(0.0, 1.0, 1.0)


@pytest.mark.parametrize("delta", [1e-4, 0.01, 0.3, 1.0, 5.0, 100.0])
@pytest.mark.parametrize("beta", [0.05, 1.0, 20.0])
def test_oucrw_covariance_psd_and_matches_simulation_integral(delta, beta):
    _, Q = zoo.oucrw_transition(delta, beta, 1.0)
    np.testing.assert_allclose(Q, Q.T)
    assert np.linalg.eigvalsh(Q).min() >= -1e-12 * abs(Q).max()
    # location variance equals the integral of the squared velocity kernel
    kern = lambda s: (-np.expm1(-beta * (delta - s)) / beta) ** 2
    ref = integrate.quad(kern, 0, delta, epsabs=0, epsrel=1e-10)[0]
    assert Q[0, 0] == pytest.approx(ref, rel=1e-6, abs=1e-300)


def test_oucrw_equal_spacing_is_time_invariant():
    m = zoo.make_oucrw()
    sd = m.prepare(TimeSeriesData.empty(_times(5)))
    coef = m.linear_gaussian(sd, m.theta())
    assert np.ptp(coef.F, axis=0).max() == 0 and np.ptp(coef.Q, axis=0).max() == 0
    assert m.process_time_varying is False
    sd = m.prepare(TimeSeriesData.empty([1.0, 1.5, 3.0, 3.2]))
    assert m.process_time_varying is True


# ---------------------------------------------------------------- CJS

def test_cjs_gamma_matrix():
    m = zoo.make_cjs(phi=1.0, p=0.5)
    np.testing.assert_array_equal(m.gamma_matrix(m.theta()), np.eye(2))


def test_cjs_perfect_detection():
    m = zoo.make_cjs(phi=0.7, p=1.0)
    data = TimeSeriesData(times=_times(6), y=[[0], [1], [1], [1], [1], [1]])
    assert hmm_loglik(m, data) == pytest.approx(4 * math.log(0.7), abs=1e-12)


def _cjs_enumerate(history, phi, p):
    f = history.index(1)
    rest = history[f + 1:]
    total = 0.0
    for path in itertools.product([0, 1], repeat=len(rest)):
        prob, prev = 1.0, 1
        for z, y in zip(path, rest):
            prob *= (phi if z else 1 - phi) if prev else (0.0 if z else 1.0)
            prob *= (p if y else 1 - p) if z else (0.0 if y else 1.0)
            prev = z
        total += prob
    return math.log(total)


def test_cjs_matches_path_enumeration():
    history = [1, 0, 1, 0, 0]
    m = zoo.make_cjs(phi=0.8, p=0.5)
    data = TimeSeriesData(times=_times(5), y=np.array(history, dtype=float)[:, None])
    assert hmm_loglik(m, data) == pytest.approx(_cjs_enumerate(history, 0.8, 0.5), abs=1e-12)


def test_cjs_dead_is_absorbing_in_simulation():
    m = zoo.make_cjs(phi=0.6, p=0.7, first_capture=[0] * 50)
    states, _ = simulate(m, None, _times(12), seed=1)
    assert np.all(np.diff(states, axis=0) <= 0)


# ---------------------------------------------------------------- densities

@pytest.mark.parametrize("name", ["ndlm", "logistic", "gompertz", "oucrw"])
def test_densities_integrate_to_one(name):
    models = {
        "ndlm": zoo.make_ndlm(alpha=0.8, beta=0.9, sigma_p=0.3, sigma_o=0.4),
        "logistic": zoo.make_logistic(z0=10.0),
        "gompertz": zoo.make_gompertz(form="raw", init=2.0),
        "oucrw": zoo.make_oucrw(),
    }
    m = models[name]
    th = m.theta()
    z_prev = m.initial_state(th).mean[None]
    z_mid = z_prev if name != "logistic" else np.array([[11.0]])

    def obs_density(y):
        sd = m.prepare(TimeSeriesData(times=[1.0], y=[y]))
        return math.exp(m.obs_logpdf(sd, 0, z_mid, th)[0])

    lo, hi = (0.0, np.inf) if name == "gompertz" else (-np.inf, np.inf)
    assert integrate.quad(obs_density, lo, hi, epsabs=1e-10)[0] == pytest.approx(1.0, abs=1e-6)

    sd = m.prepare(TimeSeriesData.empty([1.0]))

    def proc_density(v):
        z = z_prev.copy()
        z[0, 0] = v
        return math.exp(m.process_logpdf(sd, 0, z, z_prev, th)[0]) if name != "oucrw" else None

    if name == "oucrw":
        def joint(v, x):
            return math.exp(m.process_logpdf(sd, 0, np.array([[x, v]]), z_prev, th)[0])
        total = integrate.dblquad(joint, -10, 10, -10, 10, epsabs=1e-10)[0]
        assert total == pytest.approx(1.0, abs=1e-6)
        return
    lo, hi = (0.0, np.inf) if name in ("logistic", "gompertz") else (-np.inf, np.inf)
    assert integrate.quad(proc_density, lo, hi, epsabs=1e-10, limit=200)[0] == pytest.approx(1.0, abs=1e-6)


def test_dcrw_process_density_integrates_to_one():
    m = _dcrw(gamma=0.4, sigma_lon=0.5, sigma_lat=0.8, rho=0.3, fixed=["psi_lon", "psi_lat", "x0_lon",
                                                                      "x0_lat", "v0_lon", "v0_lat"])
    sd = m.prepare(TimeSeriesData.empty([0.0, 1.0], obs_dim=2))
    z_prev = np.array([[0.2, 0.1, 0.0, 0.0]])
    th = m.theta()

    def f(b, a):
        return math.exp(m.process_logpdf(sd, 0, np.array([[a, b, 0.2, 0.1]]), z_prev, th)[0])

    assert integrate.dblquad(f, -6, 6, -6, 6, epsabs=1e-10)[0] == pytest.approx(1.0, abs=1e-6)


def test_cjs_probabilities_sum_to_one():
    m = zoo.make_cjs(phi=0.65, p=0.35)
    data = TimeSeriesData(times=_times(2), y=[[1.0], [0.0]])
    sd = m.prepare(data)
    th = m.theta()
    for zp in (0.0, 1.0):
        tot = sum(math.exp(m.process_logpdf(sd, 1, np.array([[z]]), np.array([[zp]]), th)[0]) for z in (0.0, 1.0))
        assert tot == pytest.approx(1.0)


def test_build_model_registry():
    m = zoo.build_model({"model": "ndlm", "params": {"sigma_p": 0.2}, "fixed": ["z0"]})
    assert m.theta()["sigma_p"] == 0.2
    with pytest.raises(ConfigurationError):
        zoo.build_model({"model": "nope"})
