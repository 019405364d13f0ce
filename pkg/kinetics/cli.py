"""
Command-line surface: simulate, solve-kbe, converge, density, work and
compare-work. Every command writes a CSV into the output directory and
prints a short summary.
"""
import argparse
import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from shared.debug_utils import debug_function, set_debug

from . import get_method, load_all_methods
from .errors import ConfigurationError, KineticsError
from .estimate import (ESTIMATOR_REGISTRY, StopRule, convergence_orders, efficiency_index, error_density,
                       get_estimator, work_comparison_experiment, work_estimates)
from .kbe import (DEFAULT_LOG_POINTS, ValueFunction, build_lattice, load_value_function, save_value_function,
                  solve_backward)
from .model import (Observable, ReactionNetwork, decay_moment_reference, load_model_file,
                    tau_leap_decay_mean, validate_network)
from .sampling import DEFAULT_SEED, RngStream
from .simulate import LeapControl, uniform_grid

logger = logging.getLogger('kinetics')


@dataclass
class ExperimentConfig:
    model_path: str
    command: str
    taus: List[float] = field(default_factory=list)
    grid_file: Optional[str] = None
    estimators: List[str] = field(default_factory=lambda: ['lhs_approx', 'rhs_dual'])
    stop: StopRule = field(default_factory=StopRule)
    paths: Optional[int] = None
    seed: int = DEFAULT_SEED
    workers: int = 1
    out_dir: str = 'results'
    moment: Optional[int] = None
    archive: Optional[str] = None
    weight_time: str = 'at-n-plus-1'
    source: str = 'discrete-dual'
    leap_check: bool = False
    epsilon: float = 0.05

    def __post_init__(self):
        if any(t <= 0 for t in self.taus):
            raise ConfigurationError(f"tau levels must be positive, got {self.taus}")
        if any(b >= a for a, b in zip(self.taus, self.taus[1:])):
            raise ConfigurationError(f"tau levels must be strictly decreasing, got {self.taus}")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_REGISTRY]
        if unknown:
            raise ConfigurationError(f"unknown estimators {unknown} (available: {sorted(ESTIMATOR_REGISTRY)})")

    def base_grids(self, net: ReactionNetwork) -> List[np.ndarray]:
        if self.grid_file:
            grid = np.loadtxt(self.grid_file, dtype=float, ndmin=1)
            return [grid]
        if not self.taus:
            raise ConfigurationError("no tau levels given (use --tau, --tau-levels or --grid-file)")
        return [uniform_grid(net.final_time, tau) for tau in self.taus]

    def stop_rule(self) -> StopRule:
        if self.paths is not None:
            return StopRule.fixed(self.paths, seed=self.seed, workers=self.workers)
        stop = self.stop
        return StopRule(stop.z, stop.relative_target, stop.min_samples, stop.max_samples,
                        stop.batch_size, self.seed, self.workers)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'model': self.model_path,
            'command': self.command,
            'taus': self.taus,
            'estimators': self.estimators,
            'seed': self.seed,
            'workers': self.workers,
            'out_dir': self.out_dir,
            'stop': self.stop.to_dict(),
        }


@dataclass
class RunResult:
    name: str
    fieldnames: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: List[str] = field(default_factory=list)
    seed: int = DEFAULT_SEED
    grid_mode: str = 'n/a'

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'rows': len(self.rows), 'seed': self.seed}


def load_model(path, moment: Optional[int] = None) -> Tuple[ReactionNetwork, Observable]:
    """Parse and validate a model file; --moment replaces g by x^m on one-species models."""
    net, observable = load_model_file(path)
    validate_network(net, allow_constant_channels=True).raise_if_invalid()
    if moment is not None:
        if net.d != 1:
            raise ConfigurationError(f"--moment needs a one-species model, '{net.name}' has {net.d}")
        observable = Observable.monomial([moment])
    logger.info(f"[CLI] loaded model '{net.name or path}' with {net.d} species and {net.M} reactions")
    return net, observable


def _moment_of(observable: Observable) -> Optional[int]:
    if len(observable.terms) == 1 and len(observable.terms[0].exponents) == 1 and observable.terms[0].coeff == 1.0:
        return observable.terms[0].exponents[0]
    return None


def analytic_weak_error(net: ReactionNetwork, observable: Observable, grid) -> Optional[float]:
    """E[X_T] - E[Xbar_T] for decay models with g(x) = x; None otherwise."""
    if net.analytic != 'decay' or _moment_of(observable) != 1:
        return None
    x0 = int(net.initial_state[0])
    c = net.reactions[0].rate_constant
    return x0 * math.exp(-c * net.final_time) - tau_leap_decay_mean(x0, c, grid)


def _format(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ''
    return value


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Dict[str, Any]]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction='ignore', lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format(row.get(k)) for k in fieldnames})


def emit_report(result: RunResult, out_dir: str) -> str:
    csv_path = Path(out_dir) / f"{result.name}.csv"
    _write_csv(csv_path, result.fieldnames, result.rows)
    lines = [f"== {result.name} (seed {result.seed}, grid {result.grid_mode}) =="]
    if not result.rows:
        lines.append("no rows")
    lines.extend(result.summary)
    lines.append(f"wrote {csv_path}")
    text = "\n".join(lines)
    print(text)
    return text


def _load_archive(config: ExperimentConfig, observable: Observable) -> Optional[ValueFunction]:
    """Value function from --kbe; it must have been solved for the same observable."""
    if not config.archive:
        return None
    vf = load_value_function(config.archive)
    if not vf.observable.equivalent(observable):
        raise ConfigurationError(f"archive {config.archive} was solved for {vf.observable}, "
                                 f"this run uses {observable} (check --moment)")
    return vf


# commands

@debug_function
def run_simulation(config: ExperimentConfig, method_name: str) -> RunResult:
    net, _ = load_model(config.model_path)
    method = get_method(method_name)
    control = None
    if method.needs_grid:
        if config.taus:
            grid = uniform_grid(net.final_time, config.taus[0])
        elif config.grid_file:
            grid = config.base_grids(net)[0]
        else:
            grid = np.array([0.0, net.final_time])
        if config.leap_check:
            if method_name != 'bridge':
                raise ConfigurationError("--eps is only supported by the bridge method")
            control = LeapControl(config.epsilon, mode='pre-leap')
    else:
        grid = None
    n_paths = config.paths or 100
    fieldnames = ['path_index', 't_final'] + list(net.species_names) + ['n_steps', 'n_halvings']
    rows = []
    for i in range(n_paths):
        trajectory = method.simulate(net, RngStream(config.seed, i), grid, control)
        row = {'path_index': i, 't_final': float(trajectory.times[-1]),
               'n_steps': trajectory.n_jumps if trajectory.n_jumps is not None else trajectory.n_steps,
               'n_halvings': trajectory.n_halvings}
        row.update(dict(zip(net.species_names, trajectory.final_state.tolist())))
        rows.append(row)
    means = np.mean([[r[s] for s in net.species_names] for r in rows], axis=0)
    summary = [f"method {method.display_name}, {n_paths} paths",
               "mean terminal state " + ", ".join(f"{s}={m:.6g}" for s, m in zip(net.species_names, means))]
    return RunResult('simulate', fieldnames, rows, summary, config.seed)


@debug_function
def run_kbe(config: ExperimentConfig, grid_mode: str, snapshots: int, tol: Optional[float],
            log_points: int = DEFAULT_LOG_POINTS, archive: Optional[str] = None,
            interpolation: str = 'linear') -> RunResult:
    net, observable = load_model(config.model_path, config.moment)
    lattice = build_lattice(net, grid_mode, log_points, interpolation=interpolation)
    times = np.linspace(0.0, net.final_time, snapshots + 1)
    vf = solve_backward(net, lattice, times, tol, observable)
    archive = archive or str(Path(config.out_dir) / f"{net.name or 'model'}_kbe.npz")
    Path(archive).parent.mkdir(parents=True, exist_ok=True)
    save_value_function(archive, vf)
    x0 = net.initial_state
    u0 = vf.value_at(x0, 0.0)
    rows = [{'t': float(t), 'u_x0': vf.value_at(x0, t)} for t in vf.snapshot_times]
    summary = [f"lattice {lattice.size} nodes, {vf.inner_steps} inner steps, tol {vf.tol:g}",
               f"u(X0, 0) = {u0:.10g}", f"archive {archive}"]
    moment = _moment_of(observable)
    if net.analytic == 'decay' and moment is not None:
        exact = decay_moment_reference(int(x0[0]), net.reactions[0].rate_constant, net.final_time, moment)
        summary.append(f"analytic E[X_T^{moment}] = {exact:.10g} (difference {u0 - exact:.3g})")
    return RunResult('kbe', ['t', 'u_x0'], rows, summary, config.seed, grid_mode)


@debug_function
def run_convergence_study(config: ExperimentConfig) -> RunResult:
    net, observable = load_model(config.model_path, config.moment)
    vf = _load_archive(config, observable)
    grids = config.base_grids(net)
    stop = config.stop_rule()
    fieldnames = ['tau_max', 'estimator', 'value', 'se', 'n_samples', 'converged', 'analytic']
    rows = []
    samples: Dict[str, List[np.ndarray]] = {name: [] for name in config.estimators}
    values: Dict[str, List[float]] = {name: [] for name in config.estimators}
    for grid in grids:
        analytic = analytic_weak_error(net, observable, grid)
        for name in config.estimators:
            estimator = get_estimator(name)
            if estimator.needs_value_function and vf is None:
                raise ConfigurationError(f"estimator '{name}' needs --archive from solve-kbe")
            estimate = estimator.estimate(net, grid, stop, observable, vf, config.weight_time)
            rows.append({'tau_max': estimate.tau_max, 'estimator': name, 'value': estimate.value,
                         'se': estimate.standard_error, 'n_samples': estimate.n_samples,
                         'converged': estimate.converged, 'analytic': analytic})
            if not estimate.converged:
                logger.warning(f"[CLI] {name} at tau={estimate.tau_max:g} did not converge")
            samples[name].append(estimate.samples)
            values[name].append(estimate.value)

    taus = [float(np.max(np.diff(g))) for g in grids]
    summary = []
    for name in config.estimators:
        orders = convergence_orders(values[name], taus)
        summary.append(f"{name}: " + ", ".join(f"{v:.4g}" for v in values[name]) +
                       (" | orders " + ", ".join(f"{o:.2f}" for o in orders) if orders else ""))
    if 'lhs_approx' in samples and len(config.estimators) > 1:
        for name in config.estimators:
            if name == 'lhs_approx':
                continue
            for tau, lhs, rhs in zip(taus, samples['lhs_approx'], samples[name]):
                index = efficiency_index(lhs, rhs, seed=config.seed)
                flag = " (unstable)" if index.unstable else ""
                summary.append(f"efficiency lhs_approx/{name} at tau={tau:g}: {index.index:.3f} "
                               f"[{index.ci_low:.3f}, {index.ci_high:.3f}]{flag}")
    return RunResult('convergence', fieldnames, rows, summary, config.seed,
                     vf.grid_mode if vf is not None else 'n/a')


@debug_function
def run_density(config: ExperimentConfig) -> RunResult:
    net, observable = load_model(config.model_path, config.moment)
    vf = _load_archive(config, observable)
    grid = config.base_grids(net)[-1]
    estimate = error_density(net, grid, config.stop_rule(), config.source, vf, observable, config.weight_time)
    rows = []
    for n, (t, tau) in enumerate(zip(grid[:-1], np.diff(grid))):
        for j in range(net.M):
            rows.append({'n': n, 't_n': float(t), 'tau_n': float(tau), 'j': j,
                         'rho': float(estimate.per_channel_density[n, j])})
    rho_n = estimate.per_interval_density
    peak = int(np.argmax(rho_n)) if rho_n.size else 0
    summary = [f"{config.source} density from {estimate.n_samples} paths, estimate "
               f"{estimate.value:.4g} +- {1.96 * estimate.standard_error:.2g}",
               f"peak density {rho_n[peak]:.4g} at t={grid[peak]:g}"]
    return RunResult('density', ['n', 't_n', 'tau_n', 'j', 'rho'], rows, summary, config.seed,
                     vf.grid_mode if vf is not None else 'n/a')


@debug_function
def run_work_table(config: ExperimentConfig) -> RunResult:
    net, observable = load_model(config.model_path, config.moment)
    grid = config.base_grids(net)[-1]
    stop = config.stop_rule()
    sources = ['discrete-dual']
    vf = None
    if config.archive:
        vf = _load_archive(config, observable)
        sources.append('true-dual')
    elif config.source == 'true-dual':
        raise ConfigurationError("true-dual work needs --archive from solve-kbe")
    controls = [None]
    if config.leap_check:
        controls.append(LeapControl(config.epsilon, mode='pre-leap'))

    fieldnames = ['variant', 'leap_check', 'current', 'optimal', 'uniform', 'work_a', 'work_u',
                  'total_error', 'degenerate']
    rows = []
    summary = []
    for control in controls:
        for source in sources:
            estimate = error_density(net, grid, stop, source, vf, observable, config.weight_time, control)
            report = work_estimates(grid, estimate.per_interval_density, estimate.mean_steps,
                                    variant=source, leap_check=control is not None,
                                    target_error=estimate.value)
            rows.append(report.to_dict())
            if report.degenerate:
                summary.append(f"{source}{' +leap' if control else ''}: zero error estimate, "
                               f"no estimated work")
            else:
                summary.append(f"{source}{' +leap' if control else ''}: current {report.current_work:.1f}, "
                               f"optimal {report.optimal_steps:.1f}, uniform {report.uniform_steps:.1f} "
                               f"(uniform/optimal {report.uniform_work / report.optimal_work:.2f})")
    return RunResult('work', fieldnames, rows, summary, config.seed,
                     vf.grid_mode if vf is not None else 'n/a')


@debug_function
def run_compare_work(config: ExperimentConfig, orders: Sequence[int], gammas: Sequence[float], h: float,
                     ssa_paths: int) -> RunResult:
    fieldnames = ['order', 'gamma', 'tau', 'work_tl', 'work_ssa', 'ratio', 'relative_error', 'relative_error_se']
    rows = []
    for order in orders:
        for row in work_comparison_experiment(order, gammas, h, config.stop_rule(), ssa_paths):
            rows.append(row.to_dict())
    summary = [f"p={r['order']} gamma={r['gamma']:g}: TL/SSA work {r['ratio']:.3g}" for r in rows]
    return RunResult('compare_work', fieldnames, rows, summary, config.seed)


# argument parsing

def _float_list(text: str) -> List[float]:
    return [float(eval_fraction(v)) for v in text.split(',') if v.strip()]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(',') if v.strip()]


def eval_fraction(text: str) -> float:
    """'1/16' or '0.0625'."""
    text = text.strip()
    if '/' in text:
        num, den = text.split('/', 1)
        return float(num) / float(den)
    return float(text)


def build_parser(defaults: Optional[Dict[str, Any]] = None) -> argparse.ArgumentParser:
    defaults = defaults or {}
    parser = argparse.ArgumentParser(prog='kinetics',
                                     description='Tau-leap simulation and a posteriori weak error estimation.')
    parser.add_argument('--debug', action='store_true', help='trace calls into debug.log')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, needs_model=True):
        if needs_model:
            p.add_argument('--model', required=True, help='model file or bundled model name')
        p.add_argument('--seed', type=int, default=defaults.get('seed', DEFAULT_SEED))
        p.add_argument('--workers', type=int, default=defaults.get('workers', 1))
        p.add_argument('--out', default=defaults.get('out', 'results'), help='output directory')

    def stopping(p):
        p.add_argument('--se-target', type=float, default=0.1,
                       help='stop once 1.96 SE <= this fraction of |mean|')
        p.add_argument('--max-samples', type=int, default=1_000_000, help='sample cap of the SE rule')

    def grids(p):
        p.add_argument('--tau', type=eval_fraction, help='uniform base step (e.g. 1/16)')
        p.add_argument('--tau-levels', '--taus', dest='taus', type=_float_list,
                       help='comma separated tau levels, decreasing')
        p.add_argument('--grid-file', help='text file with an explicit base grid')
        p.add_argument('--moment', type=int, help='observable x^m (one-species models)')
        p.add_argument('--paths', type=int, help='fixed number of paths instead of the SE rule')
        p.add_argument('--kbe', '--archive', dest='archive', help='value-function archive from solve-kbe')
        p.add_argument('--weight-time', choices=['at-n', 'at-n-plus-1'], default='at-n-plus-1')
        stopping(p)

    p = sub.add_parser('simulate', help='simulate paths and write terminal states')
    common(p)
    p.add_argument('--method', default='bridge', help='ssa, tauleap or bridge')
    p.add_argument('--tau', type=eval_fraction)
    p.add_argument('--eps', type=float, help='pre-leap selection with this epsilon (bridge)')
    p.add_argument('--paths', type=int, default=100)

    p = sub.add_parser('solve-kbe', help='solve the backward Kolmogorov equation')
    common(p)
    p.add_argument('--grid', choices=['full', 'log'], default='full')
    p.add_argument('--snapshots', type=int, default=64, help='number of uniform snapshot intervals')
    p.add_argument('--tol', type=float)
    p.add_argument('--log-points', type=int, default=DEFAULT_LOG_POINTS)
    p.add_argument('--interp', choices=['linear', 'log'], default='linear',
                   help='interpolation coordinate between log-grid nodes')
    p.add_argument('--moment', type=int)
    p.add_argument('--archive', help='archive path (default <out>/<model>_kbe.npz)')

    p = sub.add_parser('converge', help='estimator convergence study')
    common(p)
    grids(p)
    p.add_argument('--estimators', default='lhs_approx,rhs_dual')

    p = sub.add_parser('density', help='per-interval error densities')
    common(p)
    grids(p)
    p.add_argument('--source', choices=['discrete-dual', 'true-dual'], default='discrete-dual')

    p = sub.add_parser('work', help='current, optimal and uniform work')
    common(p)
    grids(p)
    p.add_argument('--leap-check', action='store_true', help='also run with pre-leap step selection')
    p.add_argument('--eps', type=float, default=0.05)

    p = sub.add_parser('compare-work', help='tau-leap versus SSA work on the decay family')
    common(p, needs_model=False)
    p.add_argument('--orders', type=_int_list, default=[1])
    p.add_argument('--gammas', type=_float_list, default=[1e2, 1e4, 1e6])
    p.add_argument('--h', type=eval_fraction, default=1 / 16)
    p.add_argument('--ssa-paths', type=int, default=10)
    p.add_argument('--paths', type=int, help='fixed number of tau-leap paths per gamma')
    stopping(p)
    return parser


def stop_rule_from(se_target: float, max_samples: int) -> StopRule:
    """SE rule with a relative target and cap; the floor shrinks with a small cap."""
    if se_target <= 0:
        raise ConfigurationError(f"--se-target must be positive, got {se_target}")
    default = StopRule()
    return StopRule(relative_target=se_target, min_samples=min(default.min_samples, max_samples),
                    max_samples=max_samples, batch_size=min(default.batch_size, max_samples))


def config_from_args(args) -> ExperimentConfig:
    taus = list(getattr(args, 'taus', None) or [])
    if getattr(args, 'tau', None):
        taus = [args.tau]
    estimators = [e for e in getattr(args, 'estimators', 'lhs_approx,rhs_dual').split(',') if e]
    stop = stop_rule_from(getattr(args, 'se_target', 0.1), getattr(args, 'max_samples', 1_000_000))
    return ExperimentConfig(
        model_path=getattr(args, 'model', '') or '',
        command=args.command,
        taus=taus,
        grid_file=getattr(args, 'grid_file', None),
        estimators=estimators,
        stop=stop,
        paths=getattr(args, 'paths', None),
        seed=args.seed,
        workers=args.workers,
        out_dir=args.out,
        moment=getattr(args, 'moment', None),
        archive=getattr(args, 'archive', None) if args.command != 'solve-kbe' else None,
        weight_time=getattr(args, 'weight_time', 'at-n-plus-1'),
        source=getattr(args, 'source', 'discrete-dual'),
        leap_check=bool(getattr(args, 'leap_check', False) or
                        (args.command == 'simulate' and args.eps is not None)),
        epsilon=getattr(args, 'eps', None) or 0.05,
    )


def dispatch(args) -> RunResult:
    config = config_from_args(args)
    if args.command == 'simulate':
        return run_simulation(config, args.method)
    if args.command == 'solve-kbe':
        return run_kbe(config, args.grid, args.snapshots, args.tol, args.log_points, args.archive, args.interp)
    if args.command == 'converge':
        return run_convergence_study(config)
    if args.command == 'density':
        return run_density(config)
    if args.command == 'work':
        return run_work_table(config)
    if args.command == 'compare-work':
        return run_compare_work(config, args.orders, args.gammas, args.h, args.ssa_paths)
    raise ConfigurationError(f"unknown command '{args.command}'")


def main(argv: Optional[Sequence[str]] = None, defaults: Optional[Dict[str, Any]] = None) -> int:
    args = build_parser(defaults).parse_args(argv)
    if args.debug:
        set_debug(True)
    load_all_methods()
    try:
        result = dispatch(args)
    except KineticsError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 2
    emit_report(result, args.out)
    return 0


if __name__ == '__main__':
    sys.exit(main())
