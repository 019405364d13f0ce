"""
Discrete dual weights along a tau-leap path.

phi_T is the observable gradient at the terminal state and earlier weights
follow phi_n = J_n^T phi_{n+1}, where J_n approximates the first variation
of one tau-leap step, including the Poisson noise of the step through the
approximate Wiener increments of each channel.
"""
import math
from dataclasses import dataclass
from typing import Any, Dict, Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .model import (Observable, ReactionNetwork, observable_gradient, propensity_gradients,
                    propensity_vector)
from .simulate import Trajectory


@dataclass
class DualWeights:
    times: np.ndarray
    phi: np.ndarray
    jacobians: np.ndarray
    wiener_increments: np.ndarray
    transposed: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_steps': len(self.times) - 1,
            'phi_0': self.phi[0].tolist(),
            'phi_T': self.phi[-1].tolist(),
            'transposed': self.transposed,
        }


def wiener_increment(rate: float, tau: float, increment: float) -> float:
    """(dY - tau a) / sqrt(a), defined for a > 0."""
    if not rate > 0:
        raise ArgumentError(f"Wiener increment needs a positive propensity, got {rate}")
    return (increment - tau * rate) / math.sqrt(rate)


def _step_coefficients(rates: np.ndarray, tau: float, increments: Sequence[float]):
    coefficients = np.zeros(rates.size)
    wiener = np.zeros(rates.size)
    for j, rate in enumerate(rates):
        if rate > 0:
            wiener[j] = wiener_increment(rate, tau, increments[j])
            coefficients[j] = tau + wiener[j] / (2.0 * math.sqrt(rate))
    return coefficients, wiener


def variation_matrix(net: ReactionNetwork, state, tau: float, increments: Sequence[float]) -> np.ndarray:
    """Id + sum over channels with a_j > 0 of (tau + dW_j / (2 sqrt a_j)) nu_j grad(a_j)^T."""
    rates = propensity_vector(net, state)
    coefficients, _ = _step_coefficients(rates, tau, increments)
    gradients = propensity_gradients(net, state)
    return np.eye(net.d) + net.stoichiometry.T @ (coefficients[:, np.newaxis] * gradients)


def backward_dual_weights(net: ReactionNetwork, trajectory: Trajectory, observable: Observable,
                          transpose: bool = True) -> DualWeights:
    n_steps = trajectory.n_steps
    if trajectory.increments.shape != (n_steps, net.M):
        raise ConfigurationError(f"trajectory increments have shape {trajectory.increments.shape}, "
                                 f"expected ({n_steps}, {net.M})")
    taus = trajectory.taus
    phi = np.zeros((n_steps + 1, net.d))
    jacobians = np.zeros((n_steps, net.d, net.d))
    wiener = np.zeros((n_steps, net.M))
    phi[-1] = observable_gradient(observable, trajectory.states[-1])
    stoich_t = net.stoichiometry.T
    for n in range(n_steps - 1, -1, -1):
        state = trajectory.states[n]
        rates = propensity_vector(net, state)
        coefficients, wiener[n] = _step_coefficients(rates, taus[n], trajectory.increments[n])
        jacobians[n] = np.eye(net.d) + stoich_t @ (coefficients[:, np.newaxis] *
                                                   propensity_gradients(net, state))
        phi[n] = jacobians[n].T @ phi[n + 1] if transpose else jacobians[n] @ phi[n + 1]
    return DualWeights(trajectory.times.copy(), phi, jacobians, wiener, transposed=transpose)
