import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adapterfuse.context import (
    SvdConvergenceError,
    blockify,
    build_context,
    compute_delta_w,
    jacobi_singular_values,
    svd_descriptor,
    unblockify,
)
from adapterfuse.store import LoraPair, ModuleKey
from adapterfuse.topology import TransferGroup, TransferUnit


def gram_eigen_oracle(M):
    """Singular values as square roots of the eigenvalues of the Gram matrix.

    Classical two-sided Jacobi on the symmetric Gram matrix: rotate away the
    largest off-diagonal entry until the matrix is diagonal.
    """
    M = np.asarray(M, dtype=np.float64)
    G = M.T @ M if M.shape[0] >= M.shape[1] else M @ M.T
    n = G.shape[0]
    G = G.copy()
    for _ in range(100 * n * n):
        off = np.abs(G - np.diag(np.diag(G)))
        p, q = np.unravel_index(np.argmax(off), off.shape)
        if off[p, q] <= 1e-15 * max(np.abs(np.diag(G)).max(), 1e-300):
            break
        theta = 0.5 * math.atan2(2 * G[p, q], G[q, q] - G[p, p])
        c, s = math.cos(theta), math.sin(theta)
        R = np.eye(n)
        R[p, p] = c
        R[q, q] = c
        R[p, q] = s
        R[q, p] = -s
        G = R.T @ G @ R
    ev = np.clip(np.diag(G), 0.0, None)
    return np.sort(np.sqrt(ev))[::-1]


def pair(A, B, layer=0, t="q_proj"):
    A, B = np.asarray(A), np.asarray(B)
    key = ModuleKey(layer, t, A.shape[0])
    return LoraPair(key, np.asarray(A, np.float32), np.asarray(B, np.float32))


def test_delta_w_by_hand():
    assert compute_delta_w(pair([[2, 3], [4, 5]], np.eye(2))).tolist() == [[2, 3], [4, 5]]
    assert compute_delta_w(pair([[3, 4]], [[1], [2]])).tolist() == [[3, 4], [6, 8]]


def test_delta_w_matches_triple_loop():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((16, 8)).astype(np.float32)
    A = rng.standard_normal((8, 32)).astype(np.float32)
    got = compute_delta_w(pair(A, B))
    for i in range(16):
        for j in range(32):
            acc = 0.0
            for k in range(8):
                acc += float(B[i, k]) * float(A[k, j])
            assert got[i, j] == pytest.approx(acc, rel=1e-12, abs=1e-12)


def test_delta_w_dimension_mismatch():
    p = pair(np.zeros((2, 3)), np.zeros((3, 2)))
    p.B = np.zeros((3, 4), np.float32)
    with pytest.raises(ValueError):
        compute_delta_w(p)


@pytest.mark.parametrize("n, c, count, last_pad", [(5, 2, 3, 1), (4, 2, 2, 0), (1, 8, 1, 7)])
def test_blockify_counts(n, c, count, last_pad):
    tokens = blockify(np.ones((n, 3)), c)
    assert len(tokens) == count
    assert tokens[-1].pad_rows == last_pad
    assert all(t.data.shape == (c, 3) for t in tokens)
    assert np.all(tokens[-1].data[c - last_pad:] == 0)


def test_blockify_errors():
    with pytest.raises(ValueError):
        blockify(np.zeros((0, 2)), 2)
    with pytest.raises(ValueError):
        blockify(np.zeros((2, 2)), 0)


def test_unblockify_round_trip():
    M = np.arange(10.0).reshape(5, 2)
    assert np.array_equal(unblockify(blockify(M, 2), 5), M)
    M = np.random.default_rng(1).standard_normal((64, 8))
    assert np.array_equal(unblockify(blockify(M, 8), 64), M)
    with pytest.raises(ValueError):
        unblockify(blockify(M, 8), 80)


def test_descriptor_examples():
    assert svd_descriptor(np.diag([3.0, 4.0]), 2).values.tolist() == [4.0, 3.0]
    np.testing.assert_allclose(svd_descriptor(np.ones((2, 2)), 2).values, [2.0, 0.0], atol=1e-12)
    assert svd_descriptor(np.diag([3.0, 4.0]), 4).values.tolist() == [4.0, 3.0, 0.0, 0.0]
    assert svd_descriptor(np.diag([3.0, 4.0, 1.0]), 2).values.tolist() == [4.0, 3.0]


def test_descriptor_rejects_non_finite():
    with pytest.raises(ValueError):
        svd_descriptor(np.array([[np.nan, 1.0]]), 2)


def test_jacobi_iteration_cap():
    M = np.random.default_rng(2).standard_normal((6, 6))
    with pytest.raises(SvdConvergenceError):
        jacobi_singular_values(M, max_sweeps=1)


def test_descriptors_against_gram_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        rows, cols = rng.integers(1, 17, size=2)
        M = rng.standard_normal((rows, cols)) * rng.uniform(0.01, 10)
        got = jacobi_singular_values(M)
        np.testing.assert_allclose(got, gram_eigen_oracle(M), rtol=0, atol=1e-8)
        energy = float(np.sum(M * M))
        assert abs(np.sum(got ** 2) - energy) <= 1e-6 * energy


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), rows=st.integers(1, 12), cols=st.integers(1, 8), pad=st.integers(1, 6))
def test_zero_padding_neutral(seed, rows, cols, pad):
    M = np.random.default_rng(seed).standard_normal((rows, cols))
    padded = np.vstack([M, np.zeros((pad, cols))])
    plain = jacobi_singular_values(M)
    got = jacobi_singular_values(padded)
    # extra rows can only add trailing zeros to the list
    np.testing.assert_array_equal(got[: plain.shape[0]], plain)
    assert np.all(got[plain.shape[0]:] == 0)


def test_pad_token_descriptor_matches_unpadded_rows():
    M = np.random.default_rng(4).standard_normal((11, 4))
    last = blockify(M, 8)[-1]
    assert last.pad_rows == 5
    np.testing.assert_allclose(svd_descriptor(last, 4).values[:3], gram_eigen_oracle(M[8:]), atol=1e-8)
    np.testing.assert_array_equal(svd_descriptor(last, 4).values, svd_descriptor(last.data, 4).values)


def make_unit(n_sources=1, r=8, d_in=16, d_out=16, seed=0):
    rng = np.random.default_rng(seed)

    def p():
        return pair(rng.standard_normal((r, d_in)), rng.standard_normal((d_out, r)))

    group = TransferGroup(0, "q_proj", r, 0)
    return TransferUnit(group, 0, p(), [(k, p()) for k in range(n_sources)])


def test_context_token_counts_and_order():
    ctx = build_context(make_unit(1), 8, 8)
    assert [t.segment for t in ctx.target_tokens] == ["TargetA"] * 2 + ["TargetB"] * 2
    assert len(ctx.source_tokens) == 4
    ctx2 = build_context(make_unit(2), 8, 8)
    assert len(ctx2.source_tokens) == 8
    assert [t.source for t in ctx2.source_tokens] == [0] * 4 + [1] * 4
    assert [t.segment for t in ctx2.source_tokens[:4]] == ["SourceA"] * 2 + ["SourceB"] * 2
    assert [t.position for t in ctx2.source_tokens] == list(range(8))
    assert [t.run_position for t in ctx2.source_tokens] == [0, 1, 2, 3] * 2
    assert [t.position for t in ctx2.target_tokens] == list(range(4))


def test_context_deterministic_and_energy():
    a = build_context(make_unit(2, seed=5), 8, 8)
    b = build_context(make_unit(2, seed=5), 8, 8)
    for ta, tb in zip(a.target_tokens + a.source_tokens, b.target_tokens + b.source_tokens):
        assert ta.data.tobytes() == tb.data.tobytes()
    for tok, desc in zip(a.target_tokens + a.source_tokens, a.target_descriptors + a.source_descriptors):
        energy = float(np.sum(tok.valid_rows ** 2))
        assert abs(np.sum(desc.values ** 2) - energy) <= 1e-6 * energy
    for da, db in zip(a.target_descriptors + a.source_descriptors, b.target_descriptors + b.source_descriptors):
        assert da.values.tobytes() == db.values.tobytes()


def test_context_transposes_a():
    unit = make_unit(1, r=4, d_in=12, d_out=5)
    ctx = build_context(unit, 4, 4)
    a_tokens = [t for t in ctx.target_tokens if t.segment == "TargetA"]
    np.testing.assert_array_equal(unblockify(a_tokens, 12), unit.target_pair.A.T)
    b_tokens = [t for t in ctx.target_tokens if t.segment == "TargetB"]
    assert len(b_tokens) == 2 and b_tokens[-1].pad_rows == 3
