import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from exnet.core import SeededRng, matmul, normal_sample, pearson_corr, sigmoid, softmax
from oracles import textbook_corr

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax([0, 0, 0, 0]), [0.25] * 4)

    def test_shift_invariance(self):
        v = np.array([0.3, -1.2, 2.5])
        np.testing.assert_allclose(softmax(v), softmax(v + 123.0), rtol=0, atol=1e-15)

    def test_known_values(self):
        # 30-digit mpmath evaluation of e^k / sum e^i
        np.testing.assert_allclose(softmax([1, 2, 3]), [0.09003057317038046, 0.24472847105479765, 0.6652409557748219],
                                   rtol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty input"):
            softmax([])

    @given(arrays(np.float64, st.integers(1, 20), elements=finite))
    def test_probability_vector(self, v):
        p = softmax(v)
        assert np.all(p >= 0) and np.all(p <= 1)
        assert abs(p.sum() - 1) < 1e-12

    def test_wide_and_narrow_paths_agree(self):
        x = np.random.default_rng(0).normal(size=(7, 5))
        narrow = softmax(x, axis=1)
        wide = softmax(np.concatenate([x, np.full((7, 10), -np.inf)], axis=1), axis=1)[:, :5]
        np.testing.assert_allclose(narrow, wide, rtol=1e-14)


class TestSigmoid:
    def test_values(self):
        assert sigmoid(0.0) == 0.5
        assert sigmoid(2.0) == pytest.approx(0.8807970779778824, rel=1e-14)
        assert sigmoid(1e4) == 1.0
        assert sigmoid(-1e4) == 0.0

    @given(st.floats(-700, 700))
    def test_symmetry(self, x):
        assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-15

    def test_monotone(self):
        s = sigmoid(np.linspace(-30, 30, 5001))
        assert np.all(np.diff(s) >= 0)


class TestPearson:
    def test_known(self):
        assert pearson_corr([1, 2, 3, 4], [1, 2, 3, 5]) == pytest.approx(0.982707629823990790, rel=1e-12)

    def test_self_and_negation(self):
        a = np.random.default_rng(1).normal(size=10)
        assert pearson_corr(a, a) == pytest.approx(1.0)
        assert pearson_corr(a, -a) == pytest.approx(-1.0)

    def test_degenerate_flag(self):
        r, flag = pearson_corr([1, 1, 1], [1, 2, 3], with_flag=True)
        assert r == 0.0 and flag
        _, flag = pearson_corr([1, 2, 3], [3, 1, 2], with_flag=True)
        assert not flag

    def test_needs_two(self):
        with pytest.raises(ValueError):
            pearson_corr([1.0], [2.0])

    @settings(max_examples=50)
    @given(arrays(np.float64, 8, elements=st.floats(-100, 100)), arrays(np.float64, 8, elements=st.floats(-100, 100)),
           st.floats(0.1, 10), st.floats(-10, 10))
    def test_symmetric_affine_invariant(self, a, b, scale, shift):
        r = pearson_corr(a, b)
        assert -1 <= r <= 1
        assert r == pytest.approx(pearson_corr(b, a), abs=1e-12)
        if np.ptp(a) > 1e-3 and np.ptp(b) > 1e-3:
            assert r == pytest.approx(textbook_corr(list(a), list(b)), abs=1e-9)
            assert pearson_corr(scale * a + shift, b) == pytest.approx(r, abs=1e-9)


class TestRng:
    def test_reproducible(self):
        a = normal_sample(SeededRng(3).stream("x"), 0, 1, (4, 4))
        b = normal_sample(SeededRng(3).stream("x"), 0, 1, (4, 4))
        assert np.array_equal(a, b)

    def test_streams_independent(self):
        r = SeededRng(3)
        assert not np.array_equal(r.stream("a").random(5), r.stream("b").random(5))

    def test_zero_std(self):
        assert np.all(normal_sample(SeededRng(0).stream("x"), 2.5, 0.0, (3, 2)) == 2.5)

    def test_negative_std(self):
        with pytest.raises(ValueError):
            normal_sample(SeededRng(0).stream("x"), 0, -1, (2,))

    def test_law_of_large_numbers(self):
        x = normal_sample(SeededRng(1).stream("normal"), 0.0, 1.0, (10**6,))
        assert abs(x.mean()) < 0.005
        assert abs(x.std() - 1) < 0.005


class TestMatmul:
    def test_identity_and_scalar(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(matmul(a, np.eye(4)), a)
        assert matmul([[2.0]], [[3.0]])[0, 0] == 6.0

    def test_naive_oracle(self):
        g = np.random.default_rng(5)
        a, b = g.normal(size=(3, 4)), g.normal(size=(4, 2))
        naive = [[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
        np.testing.assert_allclose(matmul(a, b), naive, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ValueError, match=r"\(3, 4\).*\(3, 2\)"):
            matmul(np.zeros((3, 4)), np.zeros((3, 2)))
