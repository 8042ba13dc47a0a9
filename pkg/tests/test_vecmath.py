import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paraclap.errors import DimMismatch, NonPositiveTau, ZeroNormRow
from paraclap.vecmath import cosine_logits, l2_normalize, softmax_rows


def finite_matrices(min_rows=1, max_rows=6, min_cols=1, max_cols=8, min_val=-50, max_val=50):
    return st.integers(min_rows, max_rows).flatmap(
        lambda n: st.integers(min_cols, max_cols).flatmap(
            lambda d: arrays(
                np.float64,
                (n, d),
                elements=st.floats(min_val, max_val, allow_nan=False, allow_infinity=False),
            )
        )
    )


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(out, [[0.6, 0.8]], atol=1e-15)

    def test_axis_vectors(self):
        out = l2_normalize(np.array([[1.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 1.0]], atol=1e-15)

    def test_zero_row_rejected(self):
        with pytest.raises(ZeroNormRow) as exc:
            l2_normalize(np.array([[0.0, 0.0]]))
        assert exc.value.row == 0

    def test_unit_norm_within_tolerance(self):
        rng = np.random.default_rng(0)
        out = l2_normalize(rng.standard_normal((20, 7)))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_direction_preserved(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((5, 3))
        out = l2_normalize(m)
        cos = np.sum(out * m, axis=1) / np.linalg.norm(m, axis=1)
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)

    @given(finite_matrices(min_val=-10, max_val=10))
    @settings(max_examples=60)
    def test_idempotent(self, m):
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms <= 1e-6):
            return
        once = l2_normalize(m)
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-12)


class TestCosineLogits:
    def test_identical_unit_vector(self):
        v = np.array([[1.0, 0.0]])
        np.testing.assert_allclose(cosine_logits(v, v, 1.0), [[1.0]], atol=1e-12)

    def test_orthogonal_with_temperature(self):
        m = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = cosine_logits(m, m, 0.5)
        np.testing.assert_allclose(out, [[2.0, 0.0], [0.0, 2.0]], atol=1e-12)

    def test_antipodal(self):
        q = np.array([[1.0, 0.0]])
        k = np.array([[-1.0, 0.0]])
        np.testing.assert_allclose(cosine_logits(q, k, 1.0), [[-1.0]], atol=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            cosine_logits(np.ones((2, 3)), np.ones((2, 4)), 1.0)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_non_positive_tau(self, tau):
        with pytest.raises(NonPositiveTau):
            cosine_logits(np.ones((1, 2)), np.ones((1, 2)), tau)

    def test_bounded_by_inverse_tau(self):
        rng = np.random.default_rng(2)
        tau = 0.25
        out = cosine_logits(rng.standard_normal((6, 5)), rng.standard_normal((4, 5)), tau)
        assert np.all(np.abs(out * tau) <= 1 + 1e-9)

    def test_invariant_to_row_rescaling(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((5, 4))
        k = rng.standard_normal((6, 4))
        base = cosine_logits(q, k, 0.7)
        scales = rng.uniform(0.1, 10.0, size=(5, 1))
        np.testing.assert_allclose(cosine_logits(q * scales, k, 0.7), base, atol=1e-9)

    def test_tau_rescale_scales_logits_keeps_argmax(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((8, 6))
        k = rng.standard_normal((8, 6))
        a = cosine_logits(q, k, 1.0)
        b = cosine_logits(q, k, 0.25)
        np.testing.assert_allclose(b, a * 4.0, atol=1e-12)
        assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))


class TestSoftmaxRows:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]], atol=1e-15)

    def test_hand_computed(self):
        # softmax([2, 0]) = [e^2, 1] / (e^2 + 1)
        expected = np.array([math.exp(2.0), 1.0]) / (math.exp(2.0) + 1.0)
        np.testing.assert_allclose(softmax_rows(np.array([[2.0, 0.0]])), [expected], atol=1e-7)
        np.testing.assert_allclose(
            softmax_rows(np.array([[2.0, 0.0]])), [[0.8807971, 0.1192029]], atol=1e-7
        )

    def test_no_overflow_on_huge_logits(self):
        out = softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    @given(finite_matrices())
    @settings(max_examples=60)
    def test_rows_sum_to_one(self, m):
        out = softmax_rows(m)
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @given(finite_matrices(min_rows=1, max_rows=4), st.floats(-30, 30))
    @settings(max_examples=60)
    def test_shift_invariance(self, m, c):
        np.testing.assert_allclose(softmax_rows(m + c), softmax_rows(m), atol=1e-12)
