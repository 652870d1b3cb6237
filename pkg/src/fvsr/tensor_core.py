"""Dense float32 kernels and the reference attention every fast path is checked against.

Tensors are plain ``numpy.ndarray`` objects with dtype float32, row-major.
Masks are boolean arrays of shape ``[queries, keys]``; ``None`` stands for
the all-allowed mask and skips the masking work entirely.

Accumulation happens in float32 in a fixed order: :func:`matmul` walks
row panels of ``tile`` rows, so the same inputs give bit-identical results
across runs on one machine.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateRowError, DimensionError, EmptyBlockError

DEFAULT_TILE = 64
F32 = np.float32


def as_tensor(x, *, check_finite: bool = True) -> np.ndarray:
    """Coerce ``x`` to a contiguous float32 array with every extent >= 1."""
    arr = np.ascontiguousarray(x, dtype=F32)
    if arr.ndim == 0 or any(n < 1 for n in arr.shape):
        raise DimensionError(f"tensor extents must all be >= 1, got {arr.shape}")
    if check_finite and not np.isfinite(arr).all():
        raise ValueError("tensor contains non-finite values")
    return arr


def as_mask(mask, rows: int, cols: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (rows, cols):
        raise DimensionError(f"mask shape {mask.shape} does not match problem ({rows}, {cols})")
    return mask


def degenerate_rows(mask: np.ndarray | None) -> np.ndarray:
    """Indices of mask rows with no allowed entry."""
    if mask is None:
        return np.empty(0, dtype=np.int64)
    return np.flatnonzero(~mask.any(axis=1))


def matmul(a, b, tile: int = DEFAULT_TILE) -> np.ndarray:
    """Product of ``a [m×k]`` and ``b [k×n]``, computed one row panel at a time."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    dtype = np.result_type(a.dtype, b.dtype, F32)
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=dtype)
    for i in range(0, m, tile):
        np.matmul(a[i : i + tile], b, out=out[i : i + tile])
    return out


def masked_softmax_rows(scores, mask=None) -> np.ndarray:
    """Row softmax restricted to allowed entries; disallowed entries are exactly 0.

    Raises :class:`DegenerateRowError` if any row has no allowed entry.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise DimensionError(f"scores must be 2-D, got {scores.shape}")
    mask = as_mask(mask, *scores.shape)
    bad = degenerate_rows(mask)
    if bad.size:
        raise DegenerateRowError(bad.tolist())
    dtype = np.result_type(scores.dtype, F32)
    if mask is None:
        s = scores.astype(dtype, copy=True)
    else:
        s = np.where(mask, scores, dtype.type(-np.inf)).astype(dtype, copy=False)
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def dense_attention_oracle(q, k, v, mask=None, scale: float | None = None, tile: int = DEFAULT_TILE):
    """Reference attention ``softmax(q kᵀ · scale, mask) · v``.

    ``q`` is ``[Lq×d]``, ``k`` and ``v`` are ``[Lk×d]``; the mask is
    ``[Lq×Lk]``. ``scale`` defaults to ``1/sqrt(d)``.
    """
    q, k, v = (np.asarray(t) for t in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("q, k, v must be 2-D")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    scores = matmul(q, k.T, tile)
    scores *= scores.dtype.type(scale)
    probs = masked_softmax_rows(scores, mask)
    del scores
    return matmul(probs, v, tile)


def dense_attention_tiled(q, k, v, scale: float | None = None, tile: int = 128) -> np.ndarray:
    """Unmasked dense attention, one query panel at a time.

    The benchmark baseline: same arithmetic as the oracle but never holds
    more than ``tile × Lk`` scores.
    """
    q, k, v = (np.asarray(t, dtype=F32) for t in (q, k, v))
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    kt = np.ascontiguousarray(k.T)
    out = np.empty((q.shape[0], v.shape[1]), F32)
    for i in range(0, q.shape[0], tile):
        s = q[i : i + tile] @ kt
        s *= F32(scale)
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        np.matmul(s, v, out=out[i : i + tile])
    return out


def avg_pool_blocks(x, assignment, blocks: int) -> np.ndarray:
    """Mean of the rows of ``x [L×C]`` grouped by ``assignment`` into ``blocks`` rows.

    Tokens with a negative block id are skipped (padding).
    """
    x = np.asarray(x)
    assignment = np.asarray(assignment, dtype=np.int64)
    if x.ndim != 2 or assignment.shape != (x.shape[0],):
        raise DimensionError(f"assignment of shape {assignment.shape} does not label rows of {x.shape}")
    if assignment.size and assignment.max() >= blocks:
        raise ValueError(f"block id {assignment.max()} outside [0, {blocks})")
    keep = assignment >= 0
    ids = assignment[keep]
    counts = np.bincount(ids, minlength=blocks)
    if (counts == 0).any():
        raise EmptyBlockError(f"empty blocks: {np.flatnonzero(counts == 0).tolist()}")
    dtype = np.result_type(x.dtype, F32)
    sums = np.zeros((blocks, x.shape[1]), dtype=dtype)
    np.add.at(sums, ids, x[keep])
    return sums / counts[:, None].astype(dtype)
