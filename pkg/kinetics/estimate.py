"""
A posteriori error estimators, error densities and work models.

Three estimators of the weak tau-leap error E[g(X_T)] - E[g(Xbar_T)] are
provided and registered by name:

  lhs_approx  2 (g(Xtilde_T) - g(Xbar_T)) with a coupled half-step path
  rhs         trapezoidal residual weighted by value-function differences
  rhs_dual    the same residual weighted by discrete dual weights

Per-path residual contributions are binned to the base grid, which gives
the error density rho_{j,n} and the work of optimal and uniform meshes.
"""
import functools
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Type, Union

import numpy as np

from shared.debug_utils import debug_function, debug_method

from .dual import backward_dual_weights
from .errors import ArgumentError, ConfigurationError
from .kbe import ValueFunction, true_dual_difference
from .model import (Observable, ReactionNetwork, decay_family, evaluate_observable,
                    propensity_vector, scaled_observable)
from .sampling import DEFAULT_SEED, RngStream
from .simulate import (LeapControl, Trajectory, bridge_tau_leap_path, coupled_refined_path, ssa_path,
                       uniform_grid)

logger = logging.getLogger('kinetics')

Z_95 = 1.96
DEFAULT_BOOTSTRAP = 200
WEIGHT_TIMES = ('at-n', 'at-n-plus-1')


@dataclass
class StopRule:
    """1.96 SE <= 0.1 |mean| with sample caps; batches keep the decision deterministic."""
    z: float = Z_95
    relative_target: float = 0.1
    min_samples: int = 100
    max_samples: int = 1_000_000
    batch_size: int = 100
    seed: int = DEFAULT_SEED
    workers: int = 1

    def __post_init__(self):
        if self.min_samples < 2:
            raise ConfigurationError(f"min_samples must be at least 2, got {self.min_samples}")
        if self.max_samples < self.min_samples:
            raise ConfigurationError("max_samples must not be below min_samples")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigurationError("batch size and worker count must be positive")

    @classmethod
    def fixed(cls, n_paths: int, seed: int = DEFAULT_SEED, workers: int = 1) -> 'StopRule':
        """Exactly n_paths samples, regardless of the standard error."""
        return cls(relative_target=0.0, min_samples=n_paths, max_samples=n_paths,
                   batch_size=min(100, n_paths), seed=seed, workers=workers)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'z': self.z,
            'relative_target': self.relative_target,
            'min_samples': self.min_samples,
            'max_samples': self.max_samples,
            'batch_size': self.batch_size,
            'seed': self.seed,
            'workers': self.workers,
        }


class PathSample(NamedTuple):
    value: float
    contributions: Optional[np.ndarray] = None
    n_steps: int = 0


@dataclass
class ErrorEstimate:
    value: float
    standard_error: float
    n_samples: int
    kind: str
    converged: bool = True
    tau_max: Optional[float] = None
    seed: Optional[int] = None
    mean_steps: Optional[float] = None
    signed_density: Optional[np.ndarray] = None
    per_channel_density: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = field(default=None, repr=False)
    remainder: str = 'unquantified'

    @property
    def per_interval_density(self) -> Optional[np.ndarray]:
        if self.per_channel_density is None:
            return None
        return self.per_channel_density.sum(axis=1)

    @property
    def ci95(self) -> Tuple[float, float]:
        return self.value - Z_95 * self.standard_error, self.value + Z_95 * self.standard_error

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'value': self.value,
            'standard_error': self.standard_error,
            'n_samples': self.n_samples,
            'converged': self.converged,
            'tau_max': self.tau_max,
            'seed': self.seed,
            'mean_steps': self.mean_steps,
        }


@dataclass
class WorkReport:
    current_work: float
    optimal_work: float
    uniform_work: float
    total_error: float
    variant: str = 'discrete-dual'
    leap_check: bool = False

    @property
    def degenerate(self) -> bool:
        """Zero error target: no step count is implied."""
        return self.total_error == 0.0

    @property
    def optimal_steps(self) -> float:
        return 0.0 if self.degenerate else self.optimal_work / self.total_error

    @property
    def uniform_steps(self) -> float:
        return 0.0 if self.degenerate else self.uniform_work / self.total_error

    def to_dict(self) -> Dict[str, Any]:
        return {
            'variant': self.variant,
            'leap_check': self.leap_check,
            'current': self.current_work,
            'optimal': self.optimal_steps,
            'uniform': self.uniform_steps,
            'work_a': self.optimal_work,
            'work_u': self.uniform_work,
            'total_error': self.total_error,
            'degenerate': self.degenerate,
        }


@dataclass
class EfficiencyIndex:
    index: float
    ci_low: float
    ci_high: float
    unstable: bool = False

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> Dict[str, Any]:
        return {'index': self.index, 'ci_low': self.ci_low, 'ci_high': self.ci_high,
                'unstable': self.unstable}


@dataclass
class WorkComparisonRow:
    order: int
    gamma: float
    tau: float
    work_tl: float
    work_ssa: float
    relative_error: float
    relative_error_se: float

    @property
    def ratio(self) -> float:
        return self.work_tl / self.work_ssa if self.work_ssa > 0 else math.inf

    def to_dict(self) -> Dict[str, Any]:
        return {
            'order': self.order,
            'gamma': self.gamma,
            'tau': self.tau,
            'work_tl': self.work_tl,
            'work_ssa': self.work_ssa,
            'ratio': self.ratio,
            'relative_error': self.relative_error,
            'relative_error_se': self.relative_error_se,
        }


# Monte Carlo driver

def _evaluate_path(functional: Callable, seed: int, index: int) -> PathSample:
    result = functional(RngStream(seed, index))
    if isinstance(result, PathSample):
        return result
    return PathSample(float(result))


def standard_error(samples: np.ndarray) -> float:
    if samples.size < 2:
        return math.nan
    return float(np.std(samples, ddof=1) / math.sqrt(samples.size))


@debug_function
def mc_mean(sampler: Callable[[RngStream], Union[float, PathSample]], stop: StopRule,
            kind: str = 'mc_mean') -> ErrorEstimate:
    """Mean of an i.i.d. path functional under the standard-error stopping rule.

    Path i always uses RngStream(stop.seed, i); the stopping test runs after
    each full batch, so results do not depend on the worker count.
    """
    evaluate = functools.partial(_evaluate_path, sampler, stop.seed)
    values: List[float] = []
    steps: List[int] = []
    contributions = None
    converged = False
    executor = ProcessPoolExecutor(max_workers=stop.workers) if stop.workers > 1 else None
    try:
        while len(values) < stop.max_samples:
            start = len(values)
            batch = range(start, min(start + stop.batch_size, stop.max_samples))
            if executor is None:
                results = map(evaluate, batch)
            else:
                results = executor.map(evaluate, batch, chunksize=max(1, len(batch) // stop.workers))
            for sample in results:
                values.append(sample.value)
                steps.append(sample.n_steps)
                if sample.contributions is not None:
                    contributions = (sample.contributions.astype(float) if contributions is None
                                     else contributions + sample.contributions)
            if len(values) >= stop.min_samples:
                samples = np.asarray(values)
                mean = float(samples.mean())
                if stop.z * standard_error(samples) <= stop.relative_target * abs(mean):
                    converged = True
                    break
    finally:
        if executor is not None:
            executor.shutdown()

    samples = np.asarray(values)
    mean = float(samples.mean())
    se = standard_error(samples)
    if stop.relative_target > 0 and not converged:
        logger.warning(f"[ESTIMATE] {kind}: not converged after {samples.size} samples "
                       f"(mean {mean:.4g}, SE {se:.3g})")
    estimate = ErrorEstimate(mean, se, samples.size, kind,
                             converged=converged or stop.relative_target == 0,
                             seed=stop.seed, mean_steps=float(np.mean(steps)), samples=samples)
    if contributions is not None:
        estimate.signed_density = contributions / samples.size
    return estimate


# path functionals (module level so they pickle for worker processes)

def _default_observable(net: ReactionNetwork, observable: Optional[Observable]) -> Observable:
    return observable if observable is not None else Observable.linear([1.0] * net.d)


def _check_base_grid(net: ReactionNetwork, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ConfigurationError("base grid must start at 0 and be strictly increasing")
    if abs(grid[-1] - net.final_time) > 1e-12 * max(1.0, net.final_time):
        raise ConfigurationError(f"base grid ends at {grid[-1]}, model final time is {net.final_time}")
    return grid


def lhs_approx_sample(net: ReactionNetwork, grid, observable: Observable, rng: RngStream) -> PathSample:
    coarse = bridge_tau_leap_path(net, net.initial_state, grid, rng)
    fine = coupled_refined_path(net, coarse, rng)
    value = 2.0 * (evaluate_observable(observable, fine.final_state) -
                   evaluate_observable(observable, coarse[0].final_state))
    return PathSample(value, None, coarse[0].n_steps)


def binned_contributions(net: ReactionNetwork, trajectory: Trajectory, weight: Callable[[int, int], float],
                         n_intervals: int) -> np.ndarray:
    """C[n, j] = sum over realized steps k in base interval n of (tau_k / 2)(a_j(X_{k+1}) - a_j(X_k)) w(k, j)."""
    out = np.zeros((n_intervals, net.M))
    taus = trajectory.taus
    rates_before = propensity_vector(net, trajectory.states[0])
    for k in range(trajectory.n_steps):
        rates_after = propensity_vector(net, trajectory.states[k + 1])
        delta = rates_after - rates_before
        n = trajectory.base_index[k]
        for j in range(net.M):
            if delta[j] != 0.0:
                out[n, j] += 0.5 * taus[k] * delta[j] * weight(k, j)
        rates_before = rates_after
    return out


def rhs_dual_sample(net: ReactionNetwork, grid, observable: Observable, weight_time: str,
                    control: Optional[LeapControl], rng: RngStream) -> PathSample:
    trajectory, _ = bridge_tau_leap_path(net, net.initial_state, grid, rng, control)
    dual = backward_dual_weights(net, trajectory, observable)
    # projected[k, j] = phi_k . nu_j
    projected = dual.phi @ net.stoichiometry.T
    offset = 1 if weight_time == 'at-n-plus-1' else 0
    contributions = binned_contributions(net, trajectory, lambda k, j: projected[k + offset, j],
                                         len(grid) - 1)
    return PathSample(float(contributions.sum()), contributions, trajectory.n_steps)


def rhs_sample(net: ReactionNetwork, grid, vf: ValueFunction, control: Optional[LeapControl],
               rng: RngStream) -> PathSample:
    trajectory, _ = bridge_tau_leap_path(net, net.initial_state, grid, rng, control)
    times = trajectory.times
    states = trajectory.states

    def weight(k, j):
        return true_dual_difference(vf, states[k + 1], times[k + 1], j)

    contributions = binned_contributions(net, trajectory, weight, len(grid) - 1)
    return PathSample(float(contributions.sum()), contributions, trajectory.n_steps)


def _with_density(estimate: ErrorEstimate, grid: np.ndarray) -> ErrorEstimate:
    if estimate.signed_density is not None:
        taus = np.diff(grid)
        estimate.signed_density = estimate.signed_density / (taus ** 2)[:, np.newaxis]
        estimate.per_channel_density = np.abs(estimate.signed_density)
    estimate.tau_max = float(np.max(np.diff(grid)))
    return estimate


@debug_function
def lhs_approx_estimate(net: ReactionNetwork, base_grid, stop: StopRule,
                        observable: Optional[Observable] = None) -> ErrorEstimate:
    grid = _check_base_grid(net, base_grid)
    functional = functools.partial(lhs_approx_sample, net, grid, _default_observable(net, observable))
    return _with_density(mc_mean(functional, stop, kind='lhs_approx'), grid)


@debug_function
def rhs_estimate(net: ReactionNetwork, base_grid, vf: ValueFunction, stop: StopRule,
                 control: Optional[LeapControl] = None) -> ErrorEstimate:
    grid = _check_base_grid(net, base_grid)
    missing = [float(t) for t in grid if not vf.has_snapshot(t)]
    if missing:
        raise ConfigurationError(f"value function has no snapshot at base times {missing[:5]}")
    functional = functools.partial(rhs_sample, net, grid, vf, control)
    return _with_density(mc_mean(functional, stop, kind='rhs'), grid)


@debug_function
def rhs_dual_estimate(net: ReactionNetwork, base_grid, stop: StopRule, weight_time: str = 'at-n-plus-1',
                      observable: Optional[Observable] = None,
                      control: Optional[LeapControl] = None) -> ErrorEstimate:
    if weight_time not in WEIGHT_TIMES:
        raise ConfigurationError(f"weight_time must be one of {WEIGHT_TIMES}, got '{weight_time}'")
    grid = _check_base_grid(net, base_grid)
    functional = functools.partial(rhs_dual_sample, net, grid, _default_observable(net, observable),
                                   weight_time, control)
    return _with_density(mc_mean(functional, stop, kind='rhs_dual'), grid)


@debug_function
def error_density(net: ReactionNetwork, base_grid, stop: Union[StopRule, int], source: str = 'discrete-dual',
                  vf: Optional[ValueFunction] = None, observable: Optional[Observable] = None,
                  weight_time: str = 'at-n-plus-1', control: Optional[LeapControl] = None) -> ErrorEstimate:
    """rho_{j,n} >= 0 on the base grid; sum_n tau_n^2 sum_j signed rho recovers the estimate."""
    if isinstance(stop, int):
        stop = StopRule.fixed(stop)
    if source == 'discrete-dual':
        return rhs_dual_estimate(net, base_grid, stop, weight_time, observable, control)
    if source == 'true-dual':
        if vf is None:
            raise ConfigurationError("true-dual density needs a value function archive")
        return rhs_estimate(net, base_grid, vf, stop, control)
    raise ConfigurationError(f"unknown density source '{source}' (expected discrete-dual or true-dual)")


def work_estimates(base_grid, rho, current_work: float = 0.0, variant: str = 'discrete-dual',
                   leap_check: bool = False, target_error: Optional[float] = None) -> WorkReport:
    """Work of the optimal adaptive mesh, (sum sqrt(rho_n) tau_n)^2, and of a uniform mesh, T sum rho_n tau_n.

    The step counts are normalised by target_error, the signed error
    estimate; without it by sum tau_n^2 rho_n, which ignores cancellation
    between channels and intervals.
    """
    grid = np.asarray(base_grid, dtype=float)
    taus = np.diff(grid)
    rho = np.asarray(rho, dtype=float)
    if rho.ndim == 2:
        rho = rho.sum(axis=1)
    if rho.shape != taus.shape:
        raise ConfigurationError(f"density has {rho.size} intervals, grid has {taus.size}")
    if np.any(rho < 0):
        raise ArgumentError("error densities must be nonnegative")
    final_time = grid[-1] - grid[0]
    return WorkReport(
        current_work=float(current_work),
        optimal_work=float(np.sum(np.sqrt(rho) * taus) ** 2),
        uniform_work=float(final_time * np.sum(rho * taus)),
        total_error=float(np.sum(taus ** 2 * rho)) if target_error is None else abs(float(target_error)),
        variant=variant,
        leap_check=leap_check,
    )


def efficiency_index(lhs_samples, rhs_samples, n_bootstrap: int = DEFAULT_BOOTSTRAP,
                     seed: int = DEFAULT_SEED) -> EfficiencyIndex:
    """Ratio of means with a percentile bootstrap 95% interval."""
    lhs = np.asarray(lhs_samples, dtype=float)
    rhs = np.asarray(rhs_samples, dtype=float)
    if lhs.size == 0 or rhs.size == 0:
        raise ArgumentError("efficiency index needs nonempty sample sets")
    index = float(lhs.mean() / rhs.mean()) if rhs.mean() != 0 else math.inf
    rhs_se = standard_error(rhs) if rhs.size > 1 else 0.0
    if abs(rhs.mean()) <= Z_95 * rhs_se or rhs.mean() == 0:
        return EfficiencyIndex(index, -math.inf, math.inf, unstable=True)
    generator = RngStream(seed, 0).generator
    lhs_idx = generator.integers(0, lhs.size, size=(n_bootstrap, lhs.size))
    rhs_idx = generator.integers(0, rhs.size, size=(n_bootstrap, rhs.size))
    ratios = lhs[lhs_idx].mean(axis=1) / rhs[rhs_idx].mean(axis=1)
    low, high = np.quantile(ratios, [0.025, 0.975])
    return EfficiencyIndex(index, float(low), float(high))


def convergence_orders(values: Sequence[float], taus: Sequence[float]) -> List[float]:
    """Observed orders log(|e_k| / |e_{k+1}|) / log(tau_k / tau_{k+1}) between consecutive levels."""
    orders = []
    for (v0, v1), (t0, t1) in zip(zip(values, values[1:]), zip(taus, taus[1:])):
        if v0 == 0 or v1 == 0:
            orders.append(math.nan)
        else:
            orders.append(math.log(abs(v0) / abs(v1)) / math.log(t0 / t1))
    return orders


def _ssa_jumps(net: ReactionNetwork, rng: RngStream) -> PathSample:
    path = ssa_path(net, net.initial_state, net.final_time, rng, record_path=False)
    return PathSample(float(path.n_jumps), None, path.n_jumps)


@debug_function
def work_comparison_experiment(order: int, gammas: Sequence[float], h: float, stop: StopRule,
                               ssa_paths: int = 10, z0: float = 1.0, rate: float = 1.0,
                               final_time: float = 1.0) -> List[WorkComparisonRow]:
    """Tau-leap against SSA work on the decay family with tau = h gamma^(-delta), delta = max(2p - 2, 0)."""
    delta = max(2 * order - 2, 0)
    rows = []
    for gamma in gammas:
        net = decay_family(order, gamma, z0=z0, rate=rate, final_time=final_time)
        tau = h * gamma ** (-delta)
        grid = uniform_grid(final_time, tau)
        observable = scaled_observable(Observable.monomial([1]), gamma)
        lhs = lhs_approx_estimate(net, grid, stop, observable)
        ssa = mc_mean(functools.partial(_ssa_jumps, net),
                      StopRule.fixed(ssa_paths, seed=stop.seed + 1, workers=stop.workers), kind='ssa_work')
        row = WorkComparisonRow(order, float(gamma), tau, lhs.mean_steps, ssa.value,
                                lhs.value, lhs.standard_error)
        logger.info(f"[ESTIMATE] p={order} gamma={gamma:g}: Work_TL={row.work_tl:.1f} "
                    f"Work_SSA={row.work_ssa:.1f} rel.err={row.relative_error:.3g}")
        rows.append(row)
    return rows


# estimator registry

class ErrorEstimator(ABC):
    """Base class for the registered error estimators."""

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    @abstractmethod
    def display_name(self) -> str:
        pass

    @property
    def needs_value_function(self) -> bool:
        return False

    @abstractmethod
    def estimate(self, net: ReactionNetwork, grid, stop: StopRule, observable: Observable,
                 vf: Optional[ValueFunction] = None, weight_time: str = 'at-n-plus-1') -> ErrorEstimate:
        pass

    def get_estimator_info(self) -> Dict[str, Any]:
        return {'name': self.name, 'display_name': self.display_name,
                'needs_value_function': self.needs_value_function}


class LhsApproxEstimator(ErrorEstimator):
    name = 'lhs_approx'
    display_name = 'Coupled half-step difference'

    @debug_method
    def estimate(self, net, grid, stop, observable, vf=None, weight_time='at-n-plus-1'):
        return lhs_approx_estimate(net, grid, stop, observable)


class RhsEstimator(ErrorEstimator):
    name = 'rhs'
    display_name = 'Residual with value-function weights'
    needs_value_function = True

    @debug_method
    def estimate(self, net, grid, stop, observable, vf=None, weight_time='at-n-plus-1'):
        if vf is None:
            raise ConfigurationError("the rhs estimator needs a value function archive")
        return rhs_estimate(net, grid, vf, stop)


class RhsDualEstimator(ErrorEstimator):
    name = 'rhs_dual'
    display_name = 'Residual with discrete dual weights'

    @debug_method
    def estimate(self, net, grid, stop, observable, vf=None, weight_time='at-n-plus-1'):
        return rhs_dual_estimate(net, grid, stop, weight_time, observable)


ESTIMATOR_REGISTRY: Dict[str, Type[ErrorEstimator]] = {}


def register_estimator(estimator_class: Type[ErrorEstimator]) -> None:
    ESTIMATOR_REGISTRY[estimator_class.name] = estimator_class
    logger.debug(f"[REGISTRY] Registered estimator: {estimator_class.name}")


def get_estimator(name: str) -> ErrorEstimator:
    if name not in ESTIMATOR_REGISTRY:
        raise ConfigurationError(f"Estimator '{name}' not found in registry "
                                 f"(available: {sorted(ESTIMATOR_REGISTRY)})")
    return ESTIMATOR_REGISTRY[name]()


def get_available_estimators() -> List[Dict[str, Any]]:
    return [estimator_class().get_estimator_info() for estimator_class in ESTIMATOR_REGISTRY.values()]


register_estimator(LhsApproxEstimator)
register_estimator(RhsEstimator)
register_estimator(RhsDualEstimator)
