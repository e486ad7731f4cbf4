"""Block-pooled routing scores, pooled value magnitudes, and selection metrics.

Block routing scores are estimated from each B x B score block's main
anti-diagonal: the pairs (t, B-1-t) for t in 0..B-1, mapped to global
positions (I*B + t, J*B + B-1-t). Only pairs that exist (both positions below
the sequence length) and are causally admissible (key <= query) contribute,
and the block's estimate is their mean, so diagonal blocks with half-masked
anti-diagonals stay scale-comparable with fully admissible ones. Blocks with
no admissible pair get the mask sentinel.

Each contributing pair's score is the float32-rounded scaled dot product,
i.e. exactly the corresponding entry of :func:`causal_scores`; the mean over
those entries is accumulated in float64. A 'mean' pooling variant averaging
every admissible entry of the block is provided as an alternative estimator.

The selection metric adds a beta-weighted, nonnegative-truncated log value
magnitude to the routing estimate; with beta=0 it degenerates to the pure
score-based baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense_oracle import MASK_VALUE

# Row norms are clamped here before taking logs; log||v|| is undefined at 0.
NORM_FLOOR = 1e-12

POOLING_MODES = ("antidiagonal", "mean")


@dataclass(frozen=True)
class MetricConfig:
    """Knobs for block selection: magnitude weight, block size, pooling mode."""

    beta: float = 0.2
    block_size: int = 128
    pooling: str = "antidiagonal"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")


@dataclass
class BlockSummary:
    """Pooled per-block routing scores and log value magnitudes."""

    n_blk: int
    s_bar: np.ndarray  # n_blk x n_blk float32, sentinel above the block diagonal
    m_v: np.ndarray  # n_blk float64 max-pooled log row norms


def _n_blocks(n: int, block_size: int) -> int:
    return (n + block_size - 1) // block_size


def pool_antidiagonal_scores(
    q: np.ndarray, k: np.ndarray, block_size: int, scale: float
) -> np.ndarray:
    """Mean of each block's admissible anti-diagonal scores; sentinel if none."""
    if q.ndim != 2 or k.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share shape, got {q.shape} and {k.shape}")
    n, _ = q.shape
    if n == 0:
        raise ValueError("empty q/k")
    nb = _n_blocks(n, block_size)
    sums = np.zeros((nb, nb))
    counts = np.zeros((nb, nb), dtype=np.int64)
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    for t in range(block_size):
        k_off = block_size - 1 - t
        qt = q64[t::block_size]
        ks = k64[k_off::block_size]
        if qt.shape[0] == 0 or ks.shape[0] == 0:
            continue
        # Round each pair score to float32 first: pooled entries then agree
        # with the stored score matrix rather than drifting by half an ulp.
        c = (float(scale) * (qt @ ks.T)).astype(np.float32).astype(np.float64)
        q_pos = t + block_size * np.arange(qt.shape[0])
        k_pos = k_off + block_size * np.arange(ks.shape[0])
        admissible = k_pos[None, :] <= q_pos[:, None]
        sums[: qt.shape[0], : ks.shape[0]] += np.where(admissible, c, 0.0)
        counts[: qt.shape[0], : ks.shape[0]] += admissible
    pooled = np.where(counts > 0, sums / np.maximum(counts, 1), MASK_VALUE)
    return pooled.astype(np.float32)


def pool_mean_scores(q: np.ndarray, k: np.ndarray, block_size: int, scale: float) -> np.ndarray:
    """Mean of every admissible score in each block (alternative estimator)."""
    if q.ndim != 2 or k.ndim != 2 or q.shape != k.shape:
        raise ValueError(f"q and k must share shape, got {q.shape} and {k.shape}")
    n, _ = q.shape
    if n == 0:
        raise ValueError("empty q/k")
    nb = _n_blocks(n, block_size)
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    pooled = np.full((nb, nb), MASK_VALUE)
    # Below the block diagonal every pair is admissible, so the mean
    # factorizes through block row sums.
    q_sums = np.add.reduceat(q64, np.arange(0, n, block_size), axis=0)
    k_sums = np.add.reduceat(k64, np.arange(0, n, block_size), axis=0)
    sizes = np.minimum(np.arange(1, nb + 1) * block_size, n) - np.arange(nb) * block_size
    cross = float(scale) * (q_sums @ k_sums.T)
    for i in range(nb):
        for j in range(i):
            pooled[i, j] = cross[i, j] / (sizes[i] * sizes[j])
    # Diagonal blocks: only the block's lower triangle is admissible.
    for i in range(nb):
        lo = i * block_size
        hi = min(lo + block_size, n)
        blk = float(scale) * (q64[lo:hi] @ k64[lo:hi].T)
        mask = np.tril(np.ones((hi - lo, hi - lo), dtype=bool))
        pooled[i, i] = blk[mask].mean()
    return pooled.astype(np.float32)


def pool_value_magnitude(v: np.ndarray, block_size: int) -> np.ndarray:
    """Max over each block of log row norms, with norms clamped to 1e-12."""
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError("v must be a nonempty 2-D matrix")
    n = v.shape[0]
    norms = np.linalg.norm(v.astype(np.float64), axis=1)
    logs = np.log(np.maximum(norms, NORM_FLOOR))
    return np.maximum.reduceat(logs, np.arange(0, n, block_size))


def oam_block(s_bar: np.ndarray, m_v: np.ndarray, beta: float) -> np.ndarray:
    """Output-aware block metric: routing score plus beta * max(0, log norm).

    Sentinel entries stay sentinel; with beta=0 the result equals ``s_bar``.
    """
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if s_bar.ndim != 2 or m_v.shape[0] != s_bar.shape[1]:
        raise ValueError(
            f"shape mismatch: s_bar {s_bar.shape} vs m_v length {m_v.shape[0]}"
        )
    admissible = s_bar != np.float32(MASK_VALUE)
    boosted = s_bar.astype(np.float64) + float(beta) * np.maximum(m_v, 0.0)[None, :]
    return np.where(admissible, boosted, MASK_VALUE).astype(np.float32)


def sam_block(s_bar: np.ndarray) -> np.ndarray:
    """Score-only baseline metric: the output-aware metric at beta=0."""
    return oam_block(s_bar, np.zeros(s_bar.shape[1]), 0.0)


def oam_token_exact(q_row: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """Token-level log-domain metric: scale * <q, k_j> + log ||v_j||.

    Computed for every key row passed in (callers slice to the causal
    prefix). Float64 throughout; used by optimality and rank oracles.
    """
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"k has {k.shape[0]} rows, v has {v.shape[0]}")
    s = float(scale) * (k.astype(np.float64) @ q_row.astype(np.float64))
    norms = np.linalg.norm(v.astype(np.float64), axis=1)
    return s + np.log(np.maximum(norms, NORM_FLOOR))


def summarize_blocks(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    block_size: int,
    scale: float,
    pooling: str = "antidiagonal",
) -> BlockSummary:
    """Pooled routing scores and value magnitudes for one head."""
    if pooling == "antidiagonal":
        s_bar = pool_antidiagonal_scores(q, k, block_size, scale)
    elif pooling == "mean":
        s_bar = pool_mean_scores(q, k, block_size, scale)
    else:
        raise ValueError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
    return BlockSummary(
        n_blk=_n_blocks(q.shape[0], block_size),
        s_bar=s_bar,
        m_v=pool_value_magnitude(v, block_size),
    )
