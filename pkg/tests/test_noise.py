"""Finite-state Markov noise: stationarity, autocorrelation, exact paths."""

import numpy as np
import pytest
from scipy.linalg import expm

from hopfavg.noise import MarkovNoiseModel, NoiseError


def two_state(q=1.0):
    Q = np.array([[-q, q], [q, -q]])
    return MarkovNoiseModel(Q, np.array([-1.0, 1.0]))


def test_symmetric_two_state_stationary_distribution():
    model = two_state()
    assert np.max(np.abs(model.stationary - [0.5, 0.5])) < 1e-12


def test_asymmetric_two_state_stationary_distribution():
    # rates a->b = 1, b->a = 2 balance at nu = (2/3, 1/3)
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    sigma = np.array([1.0, -2.0])  # mean-zero under (2/3, 1/3)
    model = MarkovNoiseModel(Q, sigma)
    assert np.max(np.abs(model.stationary - [2 / 3, 1 / 3])) < 1e-12


def test_single_state_chain():
    model = MarkovNoiseModel(np.array([[0.0]]), np.array([0.0]))
    assert model.stationary[0] == pytest.approx(1.0)
    path = model.sample_path(5.0, np.random.default_rng(0))
    assert path.states.size == 1  # one interval covering [0, t_max]
    assert path.jump_times.size == 0


def test_reducible_chain_rejected():
    Q = np.zeros((2, 2))  # two absorbing states, no communication
    with pytest.raises(NoiseError):
        MarkovNoiseModel(Q, np.array([-1.0, 1.0]))


def test_mean_zero_enforced():
    Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    with pytest.raises(NoiseError):
        MarkovNoiseModel(Q, np.array([0.0, 1.0]))


def test_auto_center_subtracts_stationary_mean():
    Q = np.array([[-1.0, 1.0], [1.0, -1.0]])
    model = MarkovNoiseModel(Q, np.array([0.0, 1.0]), auto_center=True)
    assert abs(np.dot(model.stationary, model.sigma)) < 1e-12
    assert np.max(np.abs(model.sigma - [-0.5, 0.5])) < 1e-12


def test_autocorrelation_closed_form():
    # symmetric two-state with sigma = (-1, 1): sigma is the -2q eigenvector
    for q in (0.5, 1.0, 3.0):
        model = two_state(q)
        t = np.linspace(0.0, 4.0, 20)
        assert np.max(np.abs(model.autocorrelation(t) - np.exp(-2 * q * t))) < 1e-12


def test_autocorrelation_at_zero_is_variance():
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    model = MarkovNoiseModel(Q, np.array([1.0, -2.0]))
    var = np.dot(model.stationary, model.sigma ** 2)
    assert model.autocorrelation(0.0) == pytest.approx(var, abs=1e-13)
    assert model.variance == pytest.approx(var, abs=1e-13)


def test_autocorrelation_dual_route():
    # eigendecomposition route vs scaling-and-squaring matrix exponential
    rng = np.random.default_rng(5)
    n = 4
    rates = rng.uniform(0.2, 2.0, size=(n, n))
    Q = rates - np.diag(np.diag(rates))
    np.fill_diagonal(Q, -Q.sum(axis=1))
    model = MarkovNoiseModel(Q, rng.uniform(-1, 1, size=n), auto_center=True)
    for t in np.linspace(0.0, 5.0, 11):
        direct = float(model.stationary @ (model.sigma * (expm(Q * t) @ model.sigma)))
        for method in ("eig", "expm"):
            assert model.autocorrelation(t, method=method) == pytest.approx(
                direct, abs=1e-12)


def test_autocorrelation_envelope():
    # |R(t)| <= R(0) exp(-gap t) within roundoff, 50 sample times
    rng = np.random.default_rng(9)
    n = 3
    rates = rng.uniform(0.5, 1.5, size=(n, n))
    Q = rates - np.diag(np.diag(rates))
    np.fill_diagonal(Q, -Q.sum(axis=1))
    model = MarkovNoiseModel(Q, rng.uniform(-2, 2, size=n), auto_center=True)
    t = np.linspace(0.0, 6.0, 50)
    R = model.autocorrelation(t)
    envelope = model.variance * np.exp(-model.gap * t)
    assert np.all(np.abs(R) <= envelope * (1 + 1e-10) + 1e-13)
    assert np.all(np.abs(R) <= model.variance + 1e-13)


def test_autocorrelation_decays_to_zero():
    model = two_state(1.0)
    assert abs(model.autocorrelation(30.0)) < 1e-12


def test_sample_path_is_exact_ctmc():
    model = two_state(1.0)
    path = model.sample_path(1e5, np.random.default_rng(42))
    # transition instants strictly increasing; states[k] holds between them,
    # with the first interval starting at 0
    assert np.all(np.diff(path.jump_times) > 0)
    assert path.jump_times[0] > 0.0
    assert path.states.size == path.jump_times.size + 1

    # occupation of state 0 should be 1/2 within ~q^{-1/2}/sqrt(T) noise
    occ = path.occupation_fractions(2)
    assert abs(occ[0] - 0.5) < 0.01

    # lag-1 ergodic average vs R(1) = e^{-2}: 3 standard errors
    t_grid = np.arange(0.0, 1e5 - 1.0, 0.5)
    vals = path.value_at(t_grid)
    lag = path.value_at(t_grid + 1.0)
    prods = vals * lag
    se = prods.std(ddof=1) / np.sqrt(prods.size / 4.0)  # 0.5 spacing: correlated draws
    assert abs(prods.mean() - np.exp(-2.0)) < 3 * se


def test_sample_path_deterministic_given_stream():
    model = two_state(1.0)
    a = model.sample_path(100.0, np.random.default_rng(7))
    b = model.sample_path(100.0, np.random.default_rng(7))
    assert np.array_equal(a.jump_times, b.jump_times)
    assert np.array_equal(a.states, b.states)


def test_value_at_matches_state_at():
    model = two_state(2.0)
    path = model.sample_path(50.0, np.random.default_rng(3))
    t = np.linspace(0.0, 49.9, 777)
    states = path.state_at(t)
    assert np.array_equal(path.value_at(t), model.sigma[states])


def test_mixing_report_contents():
    # c2 is the spectral gap; c1 calibrated so the TV bound holds on a grid
    model = two_state(1.0)
    report = model.mixing_report()
    assert report["c2"] == pytest.approx(2.0, abs=1e-12)
    assert report["c1"] >= 1.0
    assert model.gap == pytest.approx(2.0, abs=1e-12)
    assert model.variance == pytest.approx(1.0, abs=1e-12)
