"""
Reproducible random variates.

Every simulated path owns an RngStream derived from (master_seed,
path_index) with a counter-based Philox generator, so draws do not depend
on which worker evaluates which path.
"""
import math
from typing import Sequence

import numpy as np

from .errors import ArgumentError


DEFAULT_SEED = 20100101
NORMAL_APPROXIMATION_THRESHOLD = 1.0e4


class RngStream:
    """Deterministic generator keyed by (master_seed, path_index)."""

    def __init__(self, master_seed: int = DEFAULT_SEED, path_index: int = 0):
        if master_seed < 0 or path_index < 0:
            raise ArgumentError("seed and path index must be nonnegative")
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.path_index = int(path_index)
        seq = np.random.SeedSequence([self.master_seed, self.path_index])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def spawn(self, offset: int) -> 'RngStream':
        """Independent stream for an auxiliary task of the same path."""
        return RngStream(self.master_seed ^ (0x9E3779B97F4A7C15 * (offset + 1) & 0xFFFFFFFFFFFFFFFF),
                         self.path_index)

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, path_index={self.path_index})"


def sample_poisson(mean: float, rng: RngStream) -> int:
    if not (math.isfinite(mean) and mean >= 0):
        raise ArgumentError(f"Poisson mean must be finite and nonnegative, got {mean}")
    if mean == 0:
        return 0
    return int(rng.generator.poisson(mean))


def sample_binomial(n: int, p: float, rng: RngStream) -> int:
    """Binomial(n, p); normal approximation rounded and clamped to [0, n] when n p > 1e4."""
    if not 0.0 <= p <= 1.0:
        raise ArgumentError(f"binomial probability must lie in [0, 1], got {p}")
    n = int(n)
    if n < 0:
        raise ArgumentError(f"binomial count must be nonnegative, got {n}")
    if n == 0 or p == 0.0:
        return 0
    if p == 1.0:
        return n
    mean = n * p
    if mean > NORMAL_APPROXIMATION_THRESHOLD:
        draw = rng.generator.normal(mean, math.sqrt(mean * (1.0 - p)))
        return int(min(max(round(draw), 0), n))
    # numpy uses inversion for small n p and BTPE rejection otherwise
    return int(rng.generator.binomial(n, p))


def sample_exponential(rate: float, rng: RngStream) -> float:
    if not (math.isfinite(rate) and rate > 0):
        raise ArgumentError(f"exponential rate must be positive, got {rate}")
    return float(rng.generator.exponential(1.0 / rate))


def sample_categorical(weights: Sequence[float], rng: RngStream) -> int:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ArgumentError(f"categorical weights must be finite and nonnegative, got {w}")
    total = w.sum()
    if total <= 0:
        raise ArgumentError("categorical weights are all zero")
    cumulative = np.cumsum(w)
    index = int(np.searchsorted(cumulative, rng.generator.random() * total, side='right'))
    # guard against round-off at the upper end and zero-weight trailing entries
    index = min(index, w.size - 1)
    while w[index] == 0:
        index -= 1
    return index
