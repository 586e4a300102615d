import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metric_forge.core import (
    EmbeddingBatch,
    cosine_similarity_matrix,
    l2_normalize,
    l2_normalize_rows,
    log_sum_exp,
    masked_softmax,
    normalize_rows_backward,
    squared_euclidean_matrix,
)
from metric_forge.errors import AllMasked, DimensionMismatch, EmptyInput, NotNormalized, ZeroVector

# frozen from tests/oracles/derive_scalars.py
COS_11_10 = 0.7071067811865475
MASKED_SOFTMAX = (0.549833997312478, 0.0, 0.450166002687522)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def nonzero_vec(d):
    return arrays(np.float64, d, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


class TestNormalize:
    def test_three_four(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_unit_input_unchanged(self):
        assert np.array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            l2_normalize([0.0, 0.0])
        with pytest.raises(ZeroVector):
            l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))

    @given(nonzero_vec(5))
    def test_unit_norm_and_idempotent(self, v):
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)
        # direction preserved
        assert u @ v > 0

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 4))
        g = rng.standard_normal((3, 4))
        analytic = normalize_rows_backward(x, g)
        h = 1e-6
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num[idx] = (np.sum(g * l2_normalize_rows(xp)) - np.sum(g * l2_normalize_rows(xm))) / (2 * h)
        np.testing.assert_allclose(analytic, num, atol=1e-8)


class TestEmbeddingBatch:
    def test_shape_checks(self):
        with pytest.raises(DimensionMismatch):
            EmbeddingBatch(np.zeros((3, 2)), [0, 1])
        with pytest.raises(DimensionMismatch):
            EmbeddingBatch(np.zeros(3), [0, 1, 2])

    def test_normalized_flag_is_checked(self):
        with pytest.raises(NotNormalized):
            EmbeddingBatch(np.array([[2.0, 0.0]]), [0], normalized=True)
        b = EmbeddingBatch(np.array([[2.0, 0.0], [0.0, 3.0]]), [0, 1]).normalize()
        assert b.normalized and np.allclose(np.linalg.norm(b.data, axis=1), 1.0)

    def test_negative_labels_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingBatch(np.eye(2), [0, -1])


class TestSimilarity:
    def test_cosine_examples(self):
        assert cosine_similarity_matrix([[1.0, 0.0]], [[1.0, 0.0]]).values[0, 0] == 1.0
        assert cosine_similarity_matrix([[1.0, 0.0]], [[0.0, 1.0]]).values[0, 0] == 0.0
        assert abs(cosine_similarity_matrix([[1.0, 1.0]], [[1.0, 0.0]]).values[0, 0] - COS_11_10) < 1e-12

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))
        with pytest.raises(DimensionMismatch):
            squared_euclidean_matrix(np.ones((2, 3)), np.ones((2, 4)))

    def test_cosine_zero_row(self):
        with pytest.raises(ZeroVector):
            cosine_similarity_matrix(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_squared_euclidean_examples(self):
        m = squared_euclidean_matrix([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])
        assert m.metric == "squared_euclidean"
        np.testing.assert_array_equal(m.values, [[0.0, 2.0]])

    def test_unit_identity_1000_pairs(self):
        rng = np.random.default_rng(1)
        u = l2_normalize_rows(rng.standard_normal((1000, 7)))
        v = l2_normalize_rows(rng.standard_normal((1000, 7)))
        d = np.einsum("ij,ij->i", u - v, u - v)
        cos = np.einsum("ij,ij->i", u, v)
        assert np.max(np.abs(d - (2 - 2 * cos))) < 1e-9

    @given(arrays(np.float64, (4, 3), elements=finite).filter(lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
    def test_cosine_diagonal_and_range(self, a):
        s = cosine_similarity_matrix(a, a).values
        assert np.all(np.abs(np.diag(s) - 1.0) < 1e-9)
        assert np.all(s <= 1.0) and np.all(s >= -1.0)


class TestMaskedSoftmax:
    def test_example(self):
        out = masked_softmax([0.5, 0.0, 0.3], [True, False, True])
        np.testing.assert_allclose(out, MASKED_SOFTMAX, atol=1e-12)
        assert out[1] == 0.0

    def test_uniform(self):
        np.testing.assert_allclose(masked_softmax([2.0, 2.0, 2.0], [True] * 3), [1 / 3] * 3, atol=1e-15)

    def test_all_masked(self):
        with pytest.raises(AllMasked):
            masked_softmax([1.0, 2.0], [False, False])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            masked_softmax([1.0, 2.0], [True])

    def test_large_values_stable(self):
        out = masked_softmax([1000.0, 1000.0, -1000.0], [True, True, True])
        np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-12)

    @settings(max_examples=100)
    @given(
        arrays(np.float64, 6, elements=finite),
        arrays(bool, 6).filter(lambda m: m.any()),
        st.floats(-50, 50),
    )
    def test_shift_invariance_and_sum(self, row, mask, c):
        p = masked_softmax(row, mask)
        assert abs(p.sum() - 1.0) < 1e-9
        assert np.all(p[~mask] == 0.0)
        np.testing.assert_allclose(masked_softmax(np.where(mask, row + c, row), mask), p, atol=1e-9)


class TestLogSumExp:
    def test_examples(self):
        assert log_sum_exp([0.0]) == 0.0
        assert log_sum_exp([3.5]) == 3.5
        assert abs(log_sum_exp([2.0, 2.0]) - (2.0 + math.log(2))) < 1e-15
        assert abs(log_sum_exp([1000.0, 1000.0]) - (1000.0 + math.log(2))) < 1e-12

    def test_empty(self):
        with pytest.raises(EmptyInput):
            log_sum_exp([])

    def test_axis(self):
        x = np.array([[0.0, 0.0], [1.0, -np.inf]])
        np.testing.assert_allclose(log_sum_exp(x, axis=1), [math.log(2), 1.0])
