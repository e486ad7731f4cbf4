"""Position-decayed budget schedule and its closed-form cost algebra.

The per-position budget decays linearly from ``k_start`` down to
``mu * k_start`` across the sequence and is floored to an integer:

    k(i) = floor(k_start - (k_start * (1 - mu) / n) * i),   i in 1..n

clamped to the causally available range [1, i]. Block-level budgets evaluate
the same line at the block's last token position and divide by the block
size, then apply guard-window floors, an optional whole-sequence minimum, and
the causal clamp.

Cost accounting works in (query, key) token pairs; ``stem_complexity``
converts a realized average budget into a FLOP estimate covering both the
pooled-metric computation and the sparse attention itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BudgetSchedule:
    """Decay schedule parameters plus the guard/minimum floors.

    ``k_start`` is expressed in tokens unless ``block_mode`` is set, in which
    case it counts key blocks (fractional values are allowed; flooring happens
    after interpolation). ``min_total_blocks`` floors the whole-sequence sum
    of block budgets, raising early rows first, and never exceeds what
    causality admits.
    """

    k_start: float
    mu: float
    n: int
    block_size: int = 128
    init_guard_blocks: int = 4
    local_guard_blocks: int = 4
    min_total_blocks: int = 54
    block_mode: bool = False

    def __post_init__(self):
        if not 0.0 < self.mu <= 1.0:
            raise ValueError(f"mu must lie in (0, 1], got {self.mu}")
        if self.k_start < 1:
            raise ValueError(f"k_start must be >= 1, got {self.k_start}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.init_guard_blocks < 0 or self.local_guard_blocks < 0:
            raise ValueError("guard window sizes must be >= 0")
        if self.min_total_blocks < 0:
            raise ValueError("min_total_blocks must be >= 0")

    @property
    def n_blocks(self) -> int:
        return (self.n + self.block_size - 1) // self.block_size

    @property
    def k_start_tokens(self) -> float:
        return self.k_start * self.block_size if self.block_mode else self.k_start

    @property
    def k_end_tokens(self) -> float:
        return self.mu * self.k_start_tokens


def tpd_budget(i: int, sched: BudgetSchedule) -> int:
    """Token budget for 1-based query position ``i``, clamped to [1, i]."""
    if not 1 <= i <= sched.n:
        raise ValueError(f"position {i} outside 1..{sched.n}")
    ks = sched.k_start_tokens
    k = math.floor(ks - ks * (1.0 - sched.mu) * i / sched.n)
    return max(1, min(k, i))


def _raw_block_budget(query_block: int, sched: BudgetSchedule) -> int:
    # Interpolate at the block's last token position: the budget of a block is
    # set by its most constrained (latest) query row.
    pos = min((query_block + 1) * sched.block_size, sched.n)
    ks = sched.k_start_tokens
    interp = ks - ks * (1.0 - sched.mu) * pos / sched.n
    k_blocks = int(math.floor(interp / sched.block_size))
    k_blocks = max(k_blocks, sched.init_guard_blocks + sched.local_guard_blocks, 1)
    return min(k_blocks, query_block + 1)


def block_budgets(sched: BudgetSchedule) -> np.ndarray:
    """Per-query-block budgets for the whole sequence.

    After guard floors and causal clamping, the sequence total is raised to
    ``min_total_blocks`` where causality permits, filling earlier query blocks
    to their admissible maximum first (initial positions are the ones worth
    protecting).
    """
    nb = sched.n_blocks
    budgets = np.array([_raw_block_budget(qb, sched) for qb in range(nb)], dtype=np.int64)
    admissible_total = nb * (nb + 1) // 2
    floor_total = min(sched.min_total_blocks, admissible_total)
    total = int(budgets.sum())
    qb = 0
    while total < floor_total and qb < nb:
        gain = (qb + 1) - budgets[qb]
        if gain > 0:
            budgets[qb] = qb + 1
            total += int(gain)
        qb += 1
    return budgets


def block_budget(query_block: int, sched: BudgetSchedule) -> int:
    """Budget (in key blocks) for one query block index."""
    if not 0 <= query_block < sched.n_blocks:
        raise ValueError(f"query_block {query_block} outside 0..{sched.n_blocks - 1}")
    return int(block_budgets(sched)[query_block])


def cost_uniform(n: int, k_uni: int) -> float:
    """Token-pair cost of a constant budget: n*k - k^2/2.

    The quadratic correction accounts for the causal triangle, where early
    positions have fewer than ``k_uni`` keys available.
    """
    if not 1 <= k_uni <= n:
        raise ValueError(f"k_uni must lie in 1..{n}, got {k_uni}")
    return n * float(k_uni) - 0.5 * float(k_uni) ** 2


def cost_decay(n: int, k_start: float, mu: float) -> tuple[float, float]:
    """Closed-form (cost, savings) of the linear-decay budget, in token pairs.

    cost    = n*k_start - k_start^2/2 - savings
    savings = k_start * (1 - mu) * (n - k_start) / 2

    The closed form tracks the enumerated schedule within ~n token pairs only
    in the sparse regime (roughly k_start <= sqrt(n)); beyond that the gap
    grows like k_start^2 * (1 - mu) * (n - k_start) / (2n). At mu=1 the
    savings vanish and the cost equals :func:`cost_uniform` exactly.
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")
    if not 1 <= k_start <= n:
        raise ValueError(f"k_start must lie in 1..{n}, got {k_start}")
    savings = 0.5 * k_start * (1.0 - mu) * (n - k_start)
    cost = n * float(k_start) - 0.5 * float(k_start) ** 2 - savings
    return cost, savings


def enumerated_decay_cost(n: int, k_start: float, mu: float) -> float:
    """Direct enumeration of the decay schedule: sum_i min(k(i), i)."""
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")
    if not 1 <= k_start <= n:
        raise ValueError(f"k_start must lie in 1..{n}, got {k_start}")
    i = np.arange(1, n + 1, dtype=np.float64)
    k = np.floor(k_start - k_start * (1.0 - mu) * i / n)
    return float(np.minimum(np.maximum(k, 1.0), i).sum())


def uniform_equivalent(k_start: float, mu: float) -> int:
    """Constant budget spending the same total as the decay schedule.

    The decay line averages (k_start + k_end) / 2 = k_start * (1 + mu) / 2
    across positions; rounded to the nearest integer (half away from zero).
    """
    if not 0.0 < mu <= 1.0:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")
    return int(math.floor(k_start * (1.0 + mu) / 2.0 + 0.5))


def stem_complexity(n: int, d: int, block_size: int, k_avg: float) -> float:
    """FLOP estimate for the sparse pipeline at an average budget of k_avg.

    2*n^2*d/B^2 + n*d/B covers the pooled metric (score downsampling plus
    block value magnitudes); 4*n*k_avg*d + 3*n*k_avg covers the exact sparse
    attention over the selected pairs (two matmuls plus softmax work).
    """
    if n < 1 or d < 1 or block_size < 1:
        raise ValueError("n, d, block_size must be positive")
    if k_avg < 0 or k_avg > n:
        raise ValueError(f"k_avg must lie in [0, n], got {k_avg}")
    b = float(block_size)
    metric = 2.0 * n * n * d / (b * b) + n * d / b
    sparse = 4.0 * n * k_avg * d + 3.0 * n * k_avg
    return metric + sparse


def dense_flops(n: int, d: int) -> float:
    """Reference FLOP count of dense causal attention: 4*n^2*d + 3*n^2."""
    return 4.0 * n * n * d + 3.0 * n * n


@dataclass(frozen=True)
class CostReport:
    """Closed-form and enumerated costs for one (n, d, B, k_start, mu) point."""

    uniform_cost: float
    decay_cost: float
    decay_savings: float
    enumerated_cost: float
    stem_flops: float

    @property
    def drift(self) -> float:
        return abs(self.decay_cost - self.enumerated_cost)

    def __post_init__(self):
        for name in ("uniform_cost", "decay_cost", "decay_savings", "enumerated_cost", "stem_flops"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def cost_report(n: int, d: int, block_size: int, k_start: float, mu: float) -> CostReport:
    """Assemble the full cost picture; k_avg is taken from the enumeration."""
    uniform = cost_uniform(n, int(k_start))
    decay, savings = cost_decay(n, k_start, mu)
    enumerated = enumerated_decay_cost(n, k_start, mu)
    flops = stem_complexity(n, d, block_size, enumerated / n)
    return CostReport(
        uniform_cost=uniform,
        decay_cost=decay,
        decay_savings=savings,
        enumerated_cost=enumerated,
        stem_flops=flops,
    )
