import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmlab import zoo
from ssmlab.core import TimeSeriesData, joint_log_likelihood, simulate
from ssmlab.discretized import grid_loglik
from ssmlab.estimation import fd_gradient
from ssmlab.kalman import kalman_filter, kalman_loglik, kalman_smoother
from ssmlab.laplace import inner_mode, laplace_marginal_loglik


def _times(T):
    return np.arange(1, T + 1, dtype=float)


def test_mode_equals_smoother_means(toy, toy50):
    res = inner_mode(toy, toy50)
    sm = kalman_smoother(kalman_filter(toy, toy50))
    np.testing.assert_allclose(res.states[:, 0], sm.mean[:, 0], atol=1e-8)
    assert res.converged


def test_exact_observation_pins_states():
    m = zoo.make_ndlm(sigma_p=0.3, sigma_o=1e-6)
    y = np.array([0.2, -0.1, 0.5, 0.4])
    res = inner_mode(m, TimeSeriesData(times=_times(4), y=y))
    np.testing.assert_allclose(res.states[:, 0], y, atol=1e-8)


def test_gradient_vanishes_at_mode():
    m = zoo.make_logistic(beta0=0.4, beta1=-0.02, sigma_p=0.1, sigma_o=1.0, z0=5.0, scale="log-state")
    _, data = simulate(m, None, _times(20), seed=1)
    res = inner_mode(m, data)
    g = fd_gradient(lambda w: joint_log_likelihood(m, None, w, data), res.states[:, 0], step=1e-5)
    assert np.max(np.abs(g)) < 1e-6


def test_positive_states_use_log_scale_mode():
    m = zoo.make_gompertz(form="raw", beta0=0.6, beta1=-0.3, sigma_p=0.2, sigma_o=0.2, init=2.0)
    _, data = simulate(m, None, _times(20), seed=1)
    res = inner_mode(m, data)
    # mode of p(y, z = e^w) e^w over w
    f = lambda w: joint_log_likelihood(m, None, np.exp(w), data) + w.sum()
    g = fd_gradient(f, res.latent[:, 0], step=1e-5)
    assert np.max(np.abs(g)) < 1e-6
    np.testing.assert_allclose(res.states[:, 0], np.exp(res.latent[:, 0]))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(0.05, 2.0), st.floats(0.3, 1.2), st.floats(-1.5, 1.5))
def test_exact_on_linear_gaussian(sp, so, beta, alpha):
    m = zoo.make_ndlm(alpha=alpha if abs(alpha) > 0.05 else 0.05, beta=beta, sigma_p=sp, sigma_o=so)
    _, data = simulate(m, None, _times(30), seed=7)
    data = data.mask_steps([3, 17])
    assert laplace_marginal_loglik(m, data) == pytest.approx(kalman_loglik(m, data), abs=1e-6)


def test_exact_on_oucrw_with_gaps():
    m = zoo.make_oucrw(beta=0.6, sigma=0.8, sigma_o=0.3)
    times = np.cumsum(np.random.default_rng(0).uniform(0.2, 2.0, 40))
    _, data = simulate(m, None, times, seed=2)
    assert laplace_marginal_loglik(m, data) == pytest.approx(kalman_loglik(m, data), abs=1e-6)


def test_nonlinear_gompertz_close_to_grid():
    m = zoo.make_gompertz(form="raw", beta0=0.6, beta1=-0.3, sigma_p=0.2, sigma_o=0.2, init=2.0)
    _, data = simulate(m, None, _times(50), seed=4)
    gap = abs(laplace_marginal_loglik(m, data) - grid_loglik(m, data, m=1000))
    assert gap < 0.05


def test_banded_log_det_matches_dense(toy, toy50):
    res = inner_mode(toy, toy50)
    dense = res.dense_neg_hessian()
    _, logdet = np.linalg.slogdet(dense)
    banded = 2.0 * np.sum(np.log(np.linalg.cholesky(dense).diagonal()))
    assert banded == pytest.approx(logdet, abs=1e-8)
    n = dense.shape[0]
    assert res.loglik == pytest.approx(res.joint + 0.5 * n * np.log(2 * np.pi) - 0.5 * logdet, abs=1e-8)


def test_dcrw_t_errors_approach_gaussian_limit():
    gaps = []
    track = None
    for df in (4.0, 30.0, 300.0, 1e8):
        table = zoo.DcrwErrorTable.single(scale=0.4, df=df)
        m = zoo.make_dcrw(gamma=0.5, sigma_lon=0.3, sigma_lat=0.3, error_table=table, grid_interval=1.0)
        if track is None:
            _, track = simulate(m, None, np.arange(0, 30, 0.7), seed=3)
        gaps.append(laplace_marginal_loglik(m, track))
    limit = gaps.pop()
    diffs = [abs(g - limit) for g in gaps]
    assert diffs[0] > diffs[1] > diffs[2]


def test_continuous_in_theta(toy, toy50):
    a = laplace_marginal_loglik(toy, toy50, {"sigma_p": 0.1})
    b = laplace_marginal_loglik(toy, toy50, {"sigma_p": 0.1 + 1e-6})
    assert abs(a - b) < 1e-3
