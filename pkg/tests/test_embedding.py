import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ifnd.embedding import (
    EmbeddingMatrix,
    normalize_rows,
    pairwise_similarity,
    read_matrix,
    similarity,
    write_matrix,
)
from ifnd.errors import DimensionMismatch, ZeroRowError


def test_normalize_three_four_five():
    out = normalize_rows(np.array([[3.0, 4.0], [1.0, 0.0]]))
    assert out.normalized
    np.testing.assert_allclose(out.values, [[0.6, 0.8], [1.0, 0.0]], atol=1e-15)


def test_normalize_keeps_unit_row():
    np.testing.assert_array_equal(normalize_rows(np.array([[1.0, 0.0, 0.0]])).values, [[1, 0, 0]])


def test_zero_row_reports_index():
    with pytest.raises(ZeroRowError) as err:
        normalize_rows(np.array([[1.0, 1.0], [0.0, 0.0]]))
    assert err.value.row == 1


@pytest.mark.parametrize("u, v, tau, expected", [
    ([1.0, 0.0], [1.0, 0.0], 1.0, math.e),
    ([1.0, 0.0], [0.0, 1.0], 1.0, 1.0),
    ([1.0, 0.0], [-1.0, 0.0], 0.5, math.exp(-2.0)),
])
def test_similarity_cases(u, v, tau, expected):
    assert similarity(u, v, tau) == pytest.approx(expected, rel=1e-12)


def test_similarity_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        similarity([1.0, 0.0], [1.0, 0.0, 0.0], 1.0)


def test_pairwise_identity_basis():
    np.testing.assert_allclose(pairwise_similarity(np.eye(2), 1.0), [[math.e, 1.0], [1.0, math.e]])


def test_pairwise_single_row():
    np.testing.assert_allclose(pairwise_similarity(np.array([[0.0, 1.0]]), 0.2), [[math.exp(5.0)]])


def test_pairwise_matches_scalar_loop():
    rng = np.random.default_rng(3)
    m = normalize_rows(rng.normal(size=(4, 8))).values
    p = pairwise_similarity(m, 0.3)
    for a in range(4):
        for b in range(4):
            assert abs(p[a, b] - similarity(m[a], m[b], 0.3)) <= 1e-12 * p[a, b]
    np.testing.assert_allclose(np.diag(p), math.exp(1 / 0.3), rtol=1e-12)
    np.testing.assert_array_equal(p, p.T)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                     elements=st.floats(-100, 100, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(0.01, 1000))
def test_normalize_scale_invariant(m, c):
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < 1e-3):
        return
    a = normalize_rows(m).values
    b = normalize_rows(m * c).values
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_similarity_symmetric(dim, seed, tau):
    rng = np.random.default_rng(seed)
    u, v = normalize_rows(rng.normal(size=(2, dim))).values
    assert abs(similarity(u, v, tau) - similarity(v, u, tau)) <= 1e-12 * similarity(u, v, tau)
    lo, hi = math.exp(-1 / tau), math.exp(1 / tau)
    assert lo * (1 - 1e-12) <= similarity(u, v, tau) <= hi * (1 + 1e-12)


def test_matrix_text_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = rng.normal(size=(5, 3))
    path = tmp_path / "m.txt"
    write_matrix(m, path)
    assert path.read_text().splitlines()[0] == "5 3"
    np.testing.assert_array_equal(read_matrix(path).values, m)


def test_read_matrix_rejects_wrong_row_count():
    with pytest.raises(ValueError):
        read_matrix(io.StringIO("3 2\n1 2\n3 4\n"))


def test_embedding_matrix_flags():
    with pytest.raises(ValueError):
        EmbeddingMatrix(np.array([[2.0, 0.0]]), normalized=True)
    with pytest.raises(ValueError):
        EmbeddingMatrix(np.array([[np.nan, 0.0]]))
    m = EmbeddingMatrix(np.zeros((0, 3)))
    assert m.rows == 0 and m.dim == 3
