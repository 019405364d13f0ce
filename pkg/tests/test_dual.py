import math

import numpy as np
import pytest

from kinetics.dual import backward_dual_weights, variation_matrix, wiener_increment
from kinetics.errors import ArgumentError, ConfigurationError
from kinetics.model import Observable, extend_propensity_smooth, propensity_vector
from kinetics.sampling import RngStream
from kinetics.simulate import Trajectory, bridge_tau_leap_path, uniform_grid


def mean_path(x, rate_constant, tau, n_steps):
    """Decay trajectory held at x whose increments equal their conditional means."""
    times = np.linspace(0.0, tau * n_steps, n_steps + 1)
    return Trajectory(
        times=times,
        states=np.full((n_steps + 1, 1), x, dtype=np.int64),
        increments=np.full((n_steps, 1), rate_constant * x * tau),
        halved=np.zeros(n_steps, dtype=bool),
        base_index=np.arange(n_steps),
        grid=times,
    )


def test_wiener_increment():
    assert wiener_increment(4.0, 0.5, 3.0) == pytest.approx(0.5)
    with pytest.raises(ArgumentError):
        wiener_increment(0.0, 0.5, 1.0)


def test_single_decay_step(decay1):
    net, obs = decay1
    weights = backward_dual_weights(net, mean_path(10, 0.2, 0.025, 1), obs)
    assert weights.phi[-1].tolist() == [1.0]
    assert weights.phi[0][0] == pytest.approx(0.995)
    assert weights.jacobians[0][0, 0] == pytest.approx(0.995)
    assert weights.wiener_increments[0].tolist() == pytest.approx([0.0])


def test_product_approaches_exponential(decay1):
    net, obs = decay1
    weights = backward_dual_weights(net, mean_path(10, 0.2, 1e-3, 1000), obs)
    assert weights.phi[0][0] == pytest.approx(math.exp(-0.2), abs=1e-3)


def test_transposed_equals_literal_in_one_dimension(decay3):
    net, obs = decay3
    path, _ = bridge_tau_leap_path(net, net.initial_state, uniform_grid(1.0, 0.125), RngStream(41, 0))
    transposed = backward_dual_weights(net, path, obs)
    literal = backward_dual_weights(net, path, obs, transpose=False)
    assert np.allclose(transposed.phi, literal.phi)
    assert not literal.transposed


def test_terminal_weight_is_observable_gradient(decay1):
    net, _ = decay1
    path, _ = bridge_tau_leap_path(net, net.initial_state, uniform_grid(1.0, 0.25), RngStream(43, 0))
    weights = backward_dual_weights(net, path, Observable.monomial([2]))
    assert weights.phi[-1][0] == 2.0 * path.final_state[0]
    assert weights.phi.shape == (path.n_steps + 1, 1)


def test_variation_matrix_matches_finite_differences(dimer):
    net, _ = dimer
    state = np.array([40, 30, 5])
    tau = 0.01
    increments = np.array([3, 20, 10, 2])
    rates = propensity_vector(net, state)
    noise = (increments - tau * rates) / np.sqrt(rates)

    def leap_map(x):
        a = np.array([extend_propensity_smooth(r, x).value for r in net.reactions])
        return x + net.stoichiometry.T @ (tau * a + np.sqrt(a) * noise)

    h = 1e-5
    numeric = np.zeros((net.d, net.d))
    for k in range(net.d):
        step = np.zeros(net.d)
        step[k] = h
        numeric[:, k] = (leap_map(state + step) - leap_map(state - step)) / (2 * h)
    assert np.allclose(variation_matrix(net, state, tau, increments), numeric, rtol=1e-5, atol=1e-7)


def test_silent_channels_contribute_nothing(dimer):
    net, _ = dimer
    # X2 = X3 = 0 silences dissociation and conversion
    J = variation_matrix(net, [50, 0, 0], 0.01, [1, 5, 0, 0])
    rates = propensity_vector(net, [50, 0, 0])
    assert rates[2] == rates[3] == 0.0
    assert np.all(np.isfinite(J))
    assert J[:, 1].tolist() == [0.0, 1.0, 0.0]


def test_increment_shape_mismatch(decay1):
    net, obs = decay1
    path = mean_path(10, 0.2, 0.1, 3)
    path.increments = np.zeros((3, 2))
    with pytest.raises(ConfigurationError):
        backward_dual_weights(net, path, obs)


def held_path(net, state, tau, n_steps):
    """Path held at state with increments equal to tau a(state), so every Wiener increment is zero."""
    times = np.linspace(0.0, tau * n_steps, n_steps + 1)
    rates = propensity_vector(net, state)
    return Trajectory(
        times=times,
        states=np.tile(np.asarray(state, dtype=np.int64), (n_steps + 1, 1)),
        increments=np.tile(tau * rates, (n_steps, 1)),
        halved=np.zeros(n_steps, dtype=bool),
        base_index=np.arange(n_steps),
        grid=times,
    )


def test_mean_field_product_in_three_species(dimer):
    net, obs = dimer
    state = np.array([40, 30, 5])
    tau = 0.01
    weights = backward_dual_weights(net, held_path(net, state, tau, 3), obs)
    assert np.all(weights.wiener_increments == 0.0)

    def euler_map(x):
        a = np.array([extend_propensity_smooth(r, x).value for r in net.reactions])
        return x + tau * net.stoichiometry.T @ a

    h = 1e-5
    numeric = np.zeros((net.d, net.d))
    for k in range(net.d):
        step = np.zeros(net.d)
        step[k] = h
        numeric[:, k] = (euler_map(state + step) - euler_map(state - step)) / (2 * h)
    expected = np.linalg.matrix_power(numeric.T, 3) @ np.ones(3)
    assert np.allclose(weights.phi[0], expected, rtol=1e-6, atol=1e-8)
    literal = backward_dual_weights(net, held_path(net, state, tau, 3), obs, transpose=False)
    assert not np.allclose(literal.phi[0], weights.phi[0])


@pytest.mark.slow
def test_mean_weight_matches_value_function_gradient(decay1):
    net, obs = decay1
    grid = uniform_grid(1.0, 1 / 64)
    checkpoints = (0.0, 0.5, 0.75)
    samples = {t: [] for t in checkpoints}
    for i in range(2_000):
        path, _ = bridge_tau_leap_path(net, net.initial_state, grid, RngStream(53, i))
        phi = backward_dual_weights(net, path, obs).phi
        for t in checkpoints:
            k = int(np.argmin(np.abs(path.times - t)))
            samples[t].append(phi[k][0])
    for t in checkpoints:
        values = np.array(samples[t])
        se = values.std(ddof=1) / math.sqrt(values.size)
        assert abs(values.mean() - math.exp(-0.2 * (1.0 - t))) < 3 * se + 1 / 64
