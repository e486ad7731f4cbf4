"""Float32 matrix conventions, seeded synthetic generators, and the .stt file format.

Matrices are plain 2-D ``numpy.ndarray`` objects: C-contiguous, dtype float32,
finite entries. Generator outputs are marked read-only so they can be shared
freely across threads.

The on-disk format is a raw little-endian float32 payload at ``<path>`` plus a
JSON sidecar at ``<path>.json`` describing dtype, shape, layout, and byte
order. Round trips are bit-exact.

Randomness comes from numpy's Philox counter-based generator keyed by
``(seed, stream)``; normal deviates are produced by the Box-Muller transform
on that uniform stream. This makes every generator bitwise-reproducible for a
fixed seed, independent of thread count or call interleaving elsewhere.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

# Stream tags keep independent Philox substreams from colliding.
STREAM_QKV = 0
STREAM_OUTLIER_ROWS = 1
STREAM_TOY_MODEL = 2


class TensorFormatError(ValueError):
    """Base error for problems with .stt files."""


class CorruptTensorError(TensorFormatError):
    """Payload disagrees with its sidecar (length, finiteness)."""


class UnsupportedFormatError(TensorFormatError):
    """Sidecar describes a dtype/layout this library does not read."""


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based Philox generator for an (seed, stream) pair."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


def box_muller(gen: np.random.Generator, count: int) -> np.ndarray:
    """Standard normal deviates (float64) via Box-Muller on ``gen``'s uniforms."""
    if count == 0:
        return np.zeros(0)
    pairs = (count + 1) // 2
    # 1 - U maps [0, 1) to (0, 1]; keeps the log finite.
    u1 = 1.0 - gen.random(pairs)
    u2 = gen.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])
    return z[:count]


def as_matrix(data) -> np.ndarray:
    """Validate and normalize ``data`` into the library's matrix convention."""
    m = np.ascontiguousarray(data, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {m.shape}")
    if m.size and not np.isfinite(m).all():
        raise ValueError("matrix entries must be finite")
    return m


def _freeze(m: np.ndarray) -> np.ndarray:
    m.flags.writeable = False
    return m


def _gaussian_matrix(gen: np.random.Generator, n: int, d: int, scale: float) -> np.ndarray:
    z = box_muller(gen, n * d) * float(scale)
    return z.reshape(n, d).astype(np.float32)


def gen_gaussian_qkv(
    n: int, d: int, seed: int, scale: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three independent n x d Gaussian matrices (query, key, value).

    Entries are i.i.d. N(0, scale^2), drawn Q then K then V from a single
    Philox stream, so results are deterministic in (n, d, seed, scale).
    """
    if n < 1 or d < 1:
        raise ValueError(f"matrix dimensions must be positive, got n={n}, d={d}")
    gen = rng_stream(seed, STREAM_QKV)
    q = _gaussian_matrix(gen, n, d, scale)
    k = _gaussian_matrix(gen, n, d, scale)
    v = _gaussian_matrix(gen, n, d, scale)
    return _freeze(q), _freeze(k), _freeze(v)


def gen_outlier_qkv(
    n: int, d: int, seed: int, outlier_frac: float, outlier_gain: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian Q/K/V with ceil(outlier_frac * n) high-magnitude value rows.

    The boosted row indices are drawn from a separate stream of the same seed,
    so outlier_frac=0 reproduces :func:`gen_gaussian_qkv` bitwise. Returns
    (q, k, v, outlier_rows) with the chosen rows sorted ascending.
    """
    if not 0.0 <= outlier_frac <= 1.0:
        raise ValueError(f"outlier_frac must lie in [0, 1], got {outlier_frac}")
    if outlier_gain < 1.0:
        raise ValueError(f"outlier_gain must be >= 1, got {outlier_gain}")
    if n < 1 or d < 1:
        raise ValueError(f"matrix dimensions must be positive, got n={n}, d={d}")
    gen = rng_stream(seed, STREAM_QKV)
    q = _gaussian_matrix(gen, n, d, 1.0)
    k = _gaussian_matrix(gen, n, d, 1.0)
    v = _gaussian_matrix(gen, n, d, 1.0)
    n_outliers = math.ceil(outlier_frac * n)
    if n_outliers > 0:
        rows = rng_stream(seed, STREAM_OUTLIER_ROWS).choice(n, size=n_outliers, replace=False)
        rows = np.sort(rows)
        v[rows] *= np.float32(outlier_gain)
    else:
        rows = np.zeros(0, dtype=np.int64)
    return _freeze(q), _freeze(k), _freeze(v), rows


def save_tensor(m: np.ndarray, path: str | Path) -> None:
    """Write ``m`` as f32 little-endian payload plus a JSON sidecar."""
    m = as_matrix(m)
    path = Path(path)
    header = {
        "dtype": "f32",
        "shape": [int(m.shape[0]), int(m.shape[1])],
        "layout": "row-major",
        "endian": "little",
    }
    path.write_bytes(m.astype("<f4").tobytes(order="C"))
    Path(str(path) + ".json").write_text(json.dumps(header) + "\n")


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a matrix written by :func:`save_tensor`; round trip is bit-exact."""
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    try:
        header = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptTensorError(f"unreadable sidecar {sidecar}: {exc}") from exc
    if header.get("dtype") != "f32":
        raise UnsupportedFormatError(f"unsupported dtype {header.get('dtype')!r} in {sidecar}")
    if header.get("layout", "row-major") != "row-major":
        raise UnsupportedFormatError(f"unsupported layout {header.get('layout')!r} in {sidecar}")
    if header.get("endian", "little") != "little":
        raise UnsupportedFormatError(f"unsupported endianness {header.get('endian')!r} in {sidecar}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 2
        or not all(isinstance(s, int) and s >= 1 for s in shape)
    ):
        raise CorruptTensorError(f"bad shape {shape!r} in {sidecar}")
    rows, cols = shape
    payload = path.read_bytes()
    expected = 4 * rows * cols
    if len(payload) != expected:
        raise CorruptTensorError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.isfinite(m).all():
        raise CorruptTensorError(f"{path}: payload contains non-finite values")
    return m
