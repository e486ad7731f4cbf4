"""Exact causal attention and the unrenormalized truncation surrogate.

Everything here is the ground truth that the sparse pipeline is measured
against: scaled causal scores, a numerically stable row softmax, the dense
output, the truncated (keep-set) output without renormalization, and the
separable upper bound on the truncation error.

Numerics: scores and probabilities are stored float32; all dot products and
softmax reductions accumulate in float64. Masked positions hold the most
negative finite float32 rather than -inf, so subtracting the row maximum
before exponentiating underflows them to exact zero without producing NaN.
Row outputs are accumulated in a single fixed order (ascending key index), so
a truncated output over the full causal prefix is bitwise equal to the dense
output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Mask sentinel: most negative finite float32. exp(sentinel - rowmax) == 0.
MASK_VALUE = float(np.finfo(np.float32).min)

# Per-row keep sets: sorted unique indices, each a subset of {0..i}.
KeepSets = list


@dataclass
class AttentionProbs:
    """Causal attention probability matrix: rows sum to 1 over the prefix."""

    n: int
    p: np.ndarray  # n x n float32, zeros strictly above the diagonal


def full_keep(n: int) -> KeepSets:
    """Keep sets covering the whole causal prefix of every row."""
    return [np.arange(i + 1) for i in range(n)]


def empty_keep(n: int) -> KeepSets:
    """Keep sets that drop every key."""
    return [np.zeros(0, dtype=np.int64) for _ in range(n)]


def _check_qk(q: np.ndarray, k: np.ndarray) -> None:
    if q.ndim != 2 or k.ndim != 2:
        raise ValueError("q and k must be 2-D")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"head dims differ: q has {q.shape[1]}, k has {k.shape[1]}")
    if q.shape[0] != k.shape[0]:
        raise ValueError(f"sequence lengths differ: q has {q.shape[0]}, k has {k.shape[0]}")


def _check_keep(keep: KeepSets, n: int) -> KeepSets:
    if len(keep) != n:
        raise ValueError(f"expected {n} keep sets, got {len(keep)}")
    cleaned = []
    for i, idx in enumerate(keep):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size:
            if idx[0] < 0 or idx[-1] > i:
                raise ValueError(f"keep set for row {i} holds inadmissible index")
            if np.any(np.diff(idx) <= 0):
                raise ValueError(f"keep set for row {i} is not sorted/unique")
        cleaned.append(idx)
    return cleaned


def causal_scores(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """Scaled dot-product scores with future positions set to the mask sentinel.

    Returns an n x n float32 matrix with s[i, j] = scale * <q_i, k_j> for
    j <= i; entries above the diagonal hold ``MASK_VALUE``.
    """
    _check_qk(q, k)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    n = q.shape[0]
    s64 = float(scale) * (q.astype(np.float64) @ k.astype(np.float64).T)
    s = s64.astype(np.float32)
    upper = np.triu_indices(n, k=1)
    s[upper] = np.float32(MASK_VALUE)
    return s


def row_softmax_causal(scores: np.ndarray) -> AttentionProbs:
    """Stable per-row softmax over the causal prefix of a masked score matrix."""
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"scores must be square, got shape {scores.shape}")
    n = scores.shape[0]
    p = np.zeros((n, n), dtype=np.float32)
    for i in range(n):
        tail = scores[i, i + 1 :]
        if tail.size and float(tail.max()) > MASK_VALUE:
            raise ValueError(f"row {i} has unmasked entries above the diagonal")
        row = scores[i, : i + 1].astype(np.float64)
        e = np.exp(row - row.max())
        z = e.sum()
        if z <= 0.0:  # impossible for causal prefixes: j == i is always live
            raise RuntimeError(f"row {i} is fully masked")
        p[i, : i + 1] = (e / z).astype(np.float32)
    return AttentionProbs(n=n, p=p)


def truncated_output(probs: AttentionProbs, v: np.ndarray, keep: KeepSets) -> np.ndarray:
    """Unrenormalized partial attention output: sum of p[i, j] v_j over kept j.

    With the full causal prefix kept, this reproduces the dense output
    bitwise (identical summation path). Empty keep sets give zero rows.
    """
    keep = _check_keep(keep, probs.n)
    if v.shape[0] != probs.n:
        raise ValueError(f"v has {v.shape[0]} rows, probs cover {probs.n}")
    v64 = v.astype(np.float64)
    out = np.zeros((probs.n, v.shape[1]), dtype=np.float32)
    for i, idx in enumerate(keep):
        if idx.size == 0:
            continue
        if idx.size == i + 1:  # sorted unique subset of {0..i} of full size == prefix
            p_row = probs.p[i, : i + 1].astype(np.float64)
            rows = v64[: i + 1]
        else:
            p_row = probs.p[i, idx].astype(np.float64)
            rows = v64[idx]
        out[i] = (p_row @ rows).astype(np.float32)
    return out


def dense_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray
) -> tuple[np.ndarray, AttentionProbs]:
    """Exact causal attention output plus its probability matrix.

    Uses scale 1/sqrt(d). The output is computed through the same per-row
    accumulation as :func:`truncated_output` with a full keep, which is what
    makes the full-keep bitwise-equality contract hold.
    """
    _check_qk(q, k)
    if v.shape[0] != q.shape[0]:
        raise ValueError(f"v has {v.shape[0]} rows, q has {q.shape[0]}")
    scale = 1.0 / np.sqrt(q.shape[1])
    probs = row_softmax_causal(causal_scores(q, k, scale))
    out = truncated_output(probs, v, full_keep(probs.n))
    return out, probs


def truncation_bound(probs: AttentionProbs, v: np.ndarray, keep: KeepSets) -> float:
    """Separable upper bound on the truncation error in Frobenius norm.

    Sums p[i, j] * ||v_j||_2 over every admissible j dropped from row i.
    Zero for full keeps; antitone as keep sets grow.
    """
    keep = _check_keep(keep, probs.n)
    if v.shape[0] != probs.n:
        raise ValueError(f"v has {v.shape[0]} rows, probs cover {probs.n}")
    norms = np.linalg.norm(v.astype(np.float64), axis=1)
    total = 0.0
    for i, idx in enumerate(keep):
        live = np.zeros(i + 1, dtype=bool)
        live[idx] = True
        dropped = np.flatnonzero(~live)
        if dropped.size:
            p_row = probs.p[i, dropped].astype(np.float64)
            total += float(p_row @ norms[dropped])
    return total
