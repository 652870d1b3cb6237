import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fvsr.errors import DegenerateRowError, DimensionError, EmptyBlockError
from fvsr.tensor_core import (
    avg_pool_blocks,
    dense_attention_oracle,
    dense_attention_tiled,
    masked_softmax_rows,
    matmul,
)

finite = st.floats(-30, 30, allow_nan=False, width=32)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def test_matmul_identity(rng):
    b = rng.standard_normal((3, 5)).astype(np.float32)
    assert np.array_equal(matmul(np.eye(3, dtype=np.float32), b), b)


def test_matmul_hand_example():
    out = matmul(np.array([[1, 2], [3, 4]], np.float32), np.array([[1], [1]], np.float32))
    assert out.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((2, 64, 64)).astype(np.float32)
    ref = naive_matmul(a, b)
    assert np.max(np.abs(matmul(a, b, tile=16) - ref)) / np.max(np.abs(ref)) < 1e-5


@pytest.mark.parametrize("tile", [1, 7, 64, 1000])
def test_matmul_tile_invariant(rng, tile):
    a, b = rng.standard_normal((37, 11)), rng.standard_normal((11, 5))
    assert np.allclose(matmul(a, b, tile), a @ b, atol=1e-5)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform():
    assert np.allclose(masked_softmax_rows(np.zeros((2, 4))), 0.25)


def test_softmax_diagonal_mask(rng):
    s = rng.standard_normal((5, 5))
    assert np.array_equal(masked_softmax_rows(s, np.eye(5, dtype=bool)), np.eye(5))


def test_softmax_two_segments_match_per_segment(rng):
    seg = np.array([0, 0, 0, 1, 1])
    mask = seg[:, None] == seg[None, :]
    s = rng.standard_normal((5, 5)).astype(np.float32)
    got = masked_softmax_rows(s, mask)
    for g in (0, 1):
        idx = np.flatnonzero(seg == g)
        block = s[np.ix_(idx, idx)].astype(np.float64)
        e = np.exp(block - block.max(1, keepdims=True))
        assert np.allclose(got[np.ix_(idx, idx)], e / e.sum(1, keepdims=True), atol=1e-6)
    assert np.all(got[~mask] == 0)


def test_softmax_degenerate_row_raises():
    mask = np.ones((3, 4), bool)
    mask[1] = False
    with pytest.raises(DegenerateRowError) as exc:
        masked_softmax_rows(np.zeros((3, 4)), mask)
    assert exc.value.rows == [1]


@given(arrays(np.float32, (6, 9), elements=finite), st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_softmax_properties(scores, seed, shift):
    mask = np.random.default_rng(seed).random((6, 9)) < 0.5
    mask[np.arange(6), np.arange(6)] = True
    p = masked_softmax_rows(scores, mask)
    assert np.all(p[~mask] == 0)
    assert np.allclose(p.sum(1), 1, atol=1e-6)
    shifted = masked_softmax_rows(scores + np.float32(shift), mask)
    assert np.max(np.abs(shifted - p)) < 1e-6 * max(1.0, abs(shift))


def test_attention_single_token(rng):
    q, k, v = rng.standard_normal((3, 1, 8)).astype(np.float32)
    assert np.allclose(dense_attention_oracle(q, k, v), v)


def test_attention_sharp_limit():
    d = 8
    basis = np.eye(d, dtype=np.float32)
    q = basis[[2, 5]]
    out = dense_attention_oracle(q, basis, basis, scale=25.0)  # scale · ‖q‖² = 25
    assert np.max(np.abs(out - basis[[2, 5]])) < 1e-3


def test_attention_causal_hand_expansion(rng):
    q, k, v = rng.standard_normal((3, 3, 4))
    mask = np.tril(np.ones((3, 3), bool))
    out = dense_attention_oracle(q, k, v, mask)
    sc = 1 / np.sqrt(4)
    for t in range(3):
        w = np.array([np.exp(q[t] @ k[j] * sc) for j in range(t + 1)])
        assert np.allclose(out[t], (w[:, None] * v[: t + 1]).sum(0) / w.sum(), atol=1e-6)


def test_attention_permutation_equivariant(rng):
    L = 20
    q, k, v = rng.standard_normal((3, L, 8)).astype(np.float32)
    mask = rng.random((L, L)) < 0.6
    mask[np.arange(L), np.arange(L)] = True
    p = rng.permutation(L)
    out = dense_attention_oracle(q, k, v, mask)
    outp = dense_attention_oracle(q[p], k[p], v[p], mask[np.ix_(p, p)])
    assert np.max(np.abs(outp - out[p])) < 1e-6


def test_tiled_dense_matches_oracle(rng):
    q, k, v = rng.standard_normal((3, 300, 16)).astype(np.float32)
    assert np.max(np.abs(dense_attention_tiled(q, k, v, tile=37) - dense_attention_oracle(q, k, v))) < 1e-6


def test_pool_identity_and_constant(rng):
    x = rng.standard_normal((5, 3)).astype(np.float32)
    assert np.array_equal(avg_pool_blocks(x, np.arange(5), 5), x)
    c = np.full((6, 2), 3.5, np.float32)
    assert np.allclose(avg_pool_blocks(c, [0, 1, 0, 1, 2, 2], 3), 3.5)


def test_pool_128_matches_sum(rng):
    x = rng.standard_normal((512, 4)).astype(np.float32)
    assign = rng.permutation(np.repeat(np.arange(4), 128))
    ref = np.stack([x[assign == b].astype(np.float64).sum(0) / 128 for b in range(4)])
    assert np.max(np.abs(avg_pool_blocks(x, assign, 4) - ref)) < 1e-6


def test_pool_skips_padding_and_rejects_empty():
    x = np.array([[1.0], [3.0], [100.0]], np.float32)
    assert avg_pool_blocks(x, [0, 0, -1], 1).tolist() == [[2.0]]
    with pytest.raises(EmptyBlockError):
        avg_pool_blocks(x, [0, 0, 0], 2)
