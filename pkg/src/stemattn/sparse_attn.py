"""Block-sparse causal attention: selection, exact sparse softmax, assembly.

The forward pass works query block by query block: pool the routing metric,
look up the block budget from the schedule, select key blocks (guard windows
first, then top-k by metric with ties broken toward lower block indices),
gather the selected keys/values at full resolution, and run an exact
renormalized softmax over the gathered set with per-token causal masking
inside the diagonal block.

Query blocks are independent; ``stem_forward`` optionally fans them out over
a thread pool. Each block's arithmetic is identical either way, so outputs
are bitwise-equal across worker counts.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dense_oracle import MASK_VALUE
from .metric import MetricConfig, oam_block, summarize_blocks
from .schedule import BudgetSchedule, block_budgets, stem_complexity


@dataclass
class BlockSelection:
    """Key blocks chosen for one query block, sorted ascending.

    ``forced`` marks guard-window entries; ``budget_expanded`` records that
    the guard count exceeded the nominal budget and won.
    """

    query_block: int
    blocks: np.ndarray
    forced: np.ndarray
    budget_expanded: bool = False


@dataclass
class StemStats:
    """Execution accounting for one sparse forward pass."""

    realized_budget_blocks: int
    realized_budget_fraction: float
    estimated_flops: float
    k_avg_tokens: float
    per_row_selection: list
    expanded_rows: int = 0


def select_blocks(
    metric_row: np.ndarray,
    budget: int,
    query_block: int,
    guards: tuple[int, int] = (4, 4),
) -> BlockSelection:
    """Pick key blocks for one query block under a block budget.

    Guard blocks (the first ``guards[0]`` and the ``guards[1]`` most recent
    admissible blocks) are always included, even when they exceed the budget;
    remaining slots go to the highest-metric admissible blocks, lower index
    winning ties.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    admissible = query_block + 1
    if metric_row.shape[0] < admissible:
        raise ValueError(
            f"metric row covers {metric_row.shape[0]} blocks, query block is {query_block}"
        )
    init_guard, local_guard = guards
    forced = np.zeros(admissible, dtype=bool)
    forced[: min(init_guard, admissible)] = True
    if local_guard > 0:
        forced[max(0, admissible - local_guard) :] = True
    n_forced = int(forced.sum())
    expanded = budget < n_forced
    slots = min(max(budget, n_forced), admissible)
    picked = np.flatnonzero(forced)
    free = slots - n_forced
    if free > 0:
        candidates = np.flatnonzero(~forced)
        # Stable argsort on the negated metric: equal scores keep ascending
        # block order, i.e. ties go to the lower index.
        order = np.argsort(-metric_row[candidates].astype(np.float64), kind="stable")
        picked = np.concatenate([picked, candidates[order[:free]]])
    blocks = np.sort(picked)
    return BlockSelection(
        query_block=query_block,
        blocks=blocks,
        forced=forced[blocks],
        budget_expanded=expanded,
    )


def sparse_block_attention(
    q_block: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    selection: BlockSelection,
    block_size: int,
    scale: float,
) -> np.ndarray:
    """Exact attention for one query block over its selected key blocks.

    Gathers the selected blocks' full-resolution keys and values, masks
    future positions inside the diagonal block, and renormalizes the softmax
    over the gathered set only.
    """
    if selection.blocks.size == 0:
        raise ValueError("selection must contain at least one block")
    if int(selection.blocks[-1]) > selection.query_block:
        raise ValueError("selection contains a non-causal block")
    n = k.shape[0]
    row0 = selection.query_block * block_size
    rows = q_block.shape[0]
    if row0 + rows > n or rows != min(block_size, n - row0):
        raise ValueError(f"q_block has {rows} rows, expected {min(block_size, n - row0)}")
    key_idx = np.concatenate(
        [np.arange(b * block_size, min((b + 1) * block_size, n)) for b in selection.blocks]
    )
    scores = float(scale) * (q_block.astype(np.float64) @ k.astype(np.float64)[key_idx].T)
    q_pos = row0 + np.arange(rows)
    scores[key_idx[None, :] > q_pos[:, None]] = -np.inf
    row_max = scores.max(axis=1)
    if not np.isfinite(row_max).all():
        raise ValueError("a query row has no admissible key in the selection")
    e = np.exp(scores - row_max[:, None])
    p = e / e.sum(axis=1, keepdims=True)
    return (p @ v.astype(np.float64)[key_idx]).astype(np.float32)


def stem_forward(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    sched: BudgetSchedule,
    metric: MetricConfig | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, StemStats]:
    """Sparse causal attention for one head under a decay schedule.

    Returns the n x d output and execution statistics. Deterministic in its
    inputs; worker count never changes the result.
    """
    if q.shape != k.shape or v.shape[0] != q.shape[0]:
        raise ValueError(
            f"inconsistent shapes: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    n, d = q.shape
    if n != sched.n:
        raise ValueError(f"schedule covers n={sched.n}, inputs have n={n}")
    block_size = sched.block_size
    if metric is None:
        metric = MetricConfig(block_size=block_size)
    elif metric.block_size != block_size:
        raise ValueError(
            f"metric block_size {metric.block_size} != schedule block_size {block_size}"
        )
    scale = 1.0 / np.sqrt(d)
    summary = summarize_blocks(q, k, v, block_size, scale, metric.pooling)
    metric_blocks = oam_block(summary.s_bar, summary.m_v, metric.beta)
    budgets = block_budgets(sched)
    guards = (sched.init_guard_blocks, sched.local_guard_blocks)
    nb = summary.n_blk
    token_count = np.minimum(np.arange(1, nb + 1) * block_size, n) - np.arange(nb) * block_size

    out = np.zeros((n, d), dtype=np.float32)
    selections: list = [None] * nb

    def run_block(qb: int):
        sel = select_blocks(metric_blocks[qb], int(budgets[qb]), qb, guards)
        lo = qb * block_size
        hi = min(lo + block_size, n)
        return qb, sel, sparse_block_attention(q[lo:hi], k, v, sel, block_size, scale)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, range(nb)))
    else:
        results = [run_block(qb) for qb in range(nb)]
    for qb, sel, o_block in results:
        selections[qb] = sel
        out[qb * block_size : qb * block_size + o_block.shape[0]] = o_block

    realized = sum(int(sel.blocks.size) for sel in selections)
    dense_blocks = nb * (nb + 1) // 2
    key_tokens = np.array([int(token_count[sel.blocks].sum()) for sel in selections])
    k_avg = float((key_tokens * token_count).sum()) / n
    stats = StemStats(
        realized_budget_blocks=realized,
        realized_budget_fraction=realized / dense_blocks,
        estimated_flops=stem_complexity(n, d, block_size, k_avg),
        k_avg_tokens=k_avg,
        per_row_selection=selections,
        expanded_rows=sum(1 for sel in selections if sel.budget_expanded),
    )
    return out, stats


def selection_keep_sets(selections: list, block_size: int, n: int) -> list:
    """Token-level keep sets realized by a block selection (causally clipped)."""
    keep = []
    for sel in selections:
        idx = np.concatenate(
            [np.arange(b * block_size, min((b + 1) * block_size, n)) for b in sel.blocks]
        )
        lo = sel.query_block * block_size
        for row in range(lo, min(lo + block_size, n)):
            keep.append(idx[idx <= row])
    return keep


def mask_value_unused() -> float:
    # Re-exported sentinel for callers building masked metric rows by hand.
    return MASK_VALUE
