import itertools
import math

import numpy as np
import pytest

from ssmlab import zoo
from ssmlab.core import TimeSeriesData, simulate
from ssmlab.discretized import StateGrid, grid_filter, grid_loglik, hmm_forward, hmm_loglik, hmm_smooth
from ssmlab.errors import ConfigurationError, GridCoverageError, ImpossibleDataError, UnsupportedModelError
from ssmlab.kalman import kalman_loglik


def _times(T):
    return np.arange(1, T + 1, dtype=float)


def test_grid_error_decreases_with_cells(toy):
    _, data = simulate(toy, None, _times(50), seed=3)
    exact = kalman_loglik(toy, data)
    # a wide fixed grid keeps the coarse levels visibly inexact
    errs = [abs(grid_loglik(toy, data, grid=StateGrid(-10.0, 10.0, m)) - exact) for m in (50, 100, 200, 400)]
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-4
    # the default data-driven grid is already accurate at m=400
    assert abs(grid_loglik(toy, data, m=400) - exact) < 1e-4


def test_grid_self_convergence(toy, toy50):
    assert abs(grid_loglik(toy, toy50, m=800) - grid_loglik(toy, toy50, m=400)) < 1e-5


def test_grid_matches_kalman_on_gompertz():
    m = zoo.make_gompertz(beta0=0.6, beta1=-0.3, sigma_p=0.2, sigma_o=0.1, init=2.0)
    _, data = simulate(m, None, _times(40), seed=2)
    assert grid_loglik(m, data, m=400) == pytest.approx(kalman_loglik(m, data), abs=1e-4)


def test_grid_masses_normalized(toy, toy_data):
    res = grid_filter(toy, toy_data)
    np.testing.assert_allclose(res.filt.sum(axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(res.smoothed().sum(axis=1), 1.0, atol=1e-10)


def test_grid_coverage_error(toy, toy_data):
    with pytest.raises(GridCoverageError):
        grid_filter(toy, toy_data, grid=StateGrid(50.0, 60.0, 100))


def test_grid_rejects_multivariate_and_bad_grid():
    with pytest.raises(UnsupportedModelError, match="1000"):
        grid_filter(zoo.make_oucrw(), TimeSeriesData(times=[1.0, 2.0], y=[0.0, 0.1]))
    with pytest.raises(ConfigurationError):
        StateGrid(0.0, 1.0, 1)


def test_cjs_zero_detection_is_impossible():
    m = zoo.make_cjs(phi=0.8, p=0.0)
    data = TimeSeriesData(times=_times(4), y=[[1.0], [0.0], [1.0], [0.0]])
    with pytest.raises(ImpossibleDataError):
        hmm_loglik(m, data)


def test_state_independent_emission():
    K = 3
    m = zoo.CategoricalHMM(init=[0.7, 0.2, 0.1], trans=np.eye(K), emis=np.tile([0.5, 0.3, 0.2], (K, 1)))
    y = [0, 1, 1, 2, 0]
    data = TimeSeriesData(times=_times(5), y=np.array(y, dtype=float))
    assert hmm_loglik(m, data) == pytest.approx(sum(math.log([0.5, 0.3, 0.2][v]) for v in y), abs=1e-12)


def _random_hmm(rng, K=3, M=3):
    init = rng.dirichlet(np.ones(K))
    trans = rng.dirichlet(np.ones(K), size=K)
    emis = rng.dirichlet(np.ones(M), size=K)
    return init, trans, emis


def _enumerate(init, trans, emis, y):
    K = init.size
    T = len(y)
    total = 0.0
    marg = np.zeros((T, K))
    for path in itertools.product(range(K), repeat=T):
        p = init[path[0]] * emis[path[0], y[0]]
        for t in range(1, T):
            p *= trans[path[t - 1], path[t]] * emis[path[t], y[t]]
        total += p
        for t, s in enumerate(path):
            marg[t, s] += p
    return math.log(total), marg / total


@pytest.mark.parametrize("seed", range(5))
def test_forward_backward_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    init, trans, emis = _random_hmm(rng)
    y = rng.integers(0, 3, size=6)
    m = zoo.CategoricalHMM(init, trans, emis)
    data = TimeSeriesData(times=_times(6), y=y.astype(float))
    res = hmm_forward(m, data)
    ll, marg = _enumerate(init, trans, emis, y)
    assert res.loglik == pytest.approx(ll, abs=1e-12)
    np.testing.assert_allclose(hmm_smooth(res)[0], marg, atol=1e-12)
    np.testing.assert_allclose(hmm_smooth(res)[0].sum(axis=1), 1.0)


def test_relabeling_invariance():
    rng = np.random.default_rng(7)
    init, trans, emis = _random_hmm(rng)
    perm = np.array([2, 0, 1])
    y = rng.integers(0, 3, size=8).astype(float)
    data = TimeSeriesData(times=_times(8), y=y)
    a = hmm_forward(zoo.CategoricalHMM(init, trans, emis), data)
    b = hmm_forward(zoo.CategoricalHMM(init[perm], trans[np.ix_(perm, perm)], emis[perm]), data)
    assert a.loglik == pytest.approx(b.loglik, abs=1e-12)
    np.testing.assert_allclose(a.filtered[0][:, perm], b.filtered[0], atol=1e-12)


def test_smoothing_single_step_equals_filter():
    rng = np.random.default_rng(1)
    m = zoo.CategoricalHMM(*_random_hmm(rng))
    res = hmm_forward(m, TimeSeriesData(times=[1.0], y=[1.0]))
    np.testing.assert_allclose(hmm_smooth(res)[0], res.filtered[0])


def test_cjs_final_capture_implies_alive():
    m = zoo.make_cjs(phi=0.7, p=0.4)
    data = TimeSeriesData(times=_times(6), y=[[1.0], [0.0], [0.0], [1.0], [0.0], [1.0]])
    sm = hmm_smooth(hmm_forward(m, data))[0]
    np.testing.assert_allclose(sm[:, 1], 1.0, atol=1e-12)


def test_cjs_alive_mass_never_recovers():
    m = zoo.make_cjs(phi=0.5, p=0.9)
    data = TimeSeriesData(times=_times(8), y=[[1.0]] + [[0.0]] * 7)
    f = hmm_forward(m, data).filtered[0]
    assert np.all(np.diff(f[:, 1]) <= 1e-15)


def test_cjs_multiple_individuals_add():
    m1 = zoo.make_cjs(phi=0.8, p=0.5)
    m2 = zoo.make_cjs(phi=0.8, p=0.5, n_individuals=2)
    h1 = np.array([1, 0, 1, 0, 0], dtype=float)
    h2 = np.array([0, 1, 1, 1, 0], dtype=float)
    d1 = TimeSeriesData(times=_times(5), y=h1)
    d2 = TimeSeriesData(times=_times(5), y=h2)
    both = TimeSeriesData(times=_times(5), y=np.stack([h1, h2], axis=1))
    assert hmm_loglik(m2, both) == pytest.approx(hmm_loglik(m1, d1) + hmm_loglik(m1, d2), abs=1e-12)
