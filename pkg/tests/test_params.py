import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkit import (
    DimensionError,
    DomainError,
    EvalScore,
    ModelUpdate,
    NumericError,
    ParameterVector,
    add_scaled,
    dice_score,
    l2_distance,
)


def brute_force_dice(a, b):
    """Counting oracle: walk both masks and count memberships directly."""
    size_a = sum(1 for x in a if x == 1)
    size_b = sum(1 for x in b if x == 1)
    inter = sum(1 for x, y in zip(a, b) if x == 1 and y == 1)
    if size_a + size_b == 0:
        return 1.0
    return (2 * inter) / (size_a + size_b)


class TestParameterVector:
    def test_dim_matches_length(self):
        v = ParameterVector([1.0, 2.0, 3.0])
        assert v.dim == 3

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            ParameterVector([1.0, float("nan")])
        with pytest.raises(NumericError):
            ParameterVector([float("inf")])

    def test_rejects_empty_and_2d(self):
        with pytest.raises(DimensionError):
            ParameterVector([])
        with pytest.raises(DimensionError):
            ParameterVector([[1.0], [2.0]])

    def test_values_are_immutable(self):
        v = ParameterVector([1.0, 2.0])
        with pytest.raises(ValueError):
            v.values[0] = 9.0

    def test_equality_is_bitwise(self):
        assert ParameterVector([1.0, 2.0]) == ParameterVector([1.0, 2.0])
        assert ParameterVector([1.0, 2.0]) != ParameterVector([1.0, 2.0 + 1e-15])


class TestModelUpdate:
    def test_requires_positive_sample_count(self):
        with pytest.raises(DomainError):
            ModelUpdate("a", 0, ParameterVector([1.0]), 0)

    def test_requires_non_negative_round(self):
        with pytest.raises(DomainError):
            ModelUpdate("a", -1, ParameterVector([1.0]), 1)


class TestEvalScore:
    def test_dice_mean_bounded(self):
        with pytest.raises(DomainError):
            EvalScore(mean=1.2, std=0.0, metric="dice")

    def test_mse_mean_unbounded(self):
        EvalScore(mean=123.0, std=0.5, metric="mse_loss")


class TestAddScaled:
    def test_zero_coeff_is_identity(self):
        assert add_scaled(ParameterVector([1, 2]), ParameterVector([3, 4]), 0.0) == ParameterVector([1, 2])

    def test_self_cancellation(self):
        assert add_scaled(ParameterVector([1, 2]), ParameterVector([1, 2]), -1.0) == ParameterVector([0, 0])

    def test_elementwise_arithmetic(self):
        # oracle: 1 + 0.5*2 = 2, 0 + 0.5*2 = 1
        assert add_scaled(ParameterVector([1, 0]), ParameterVector([2, 2]), 0.5) == ParameterVector([2, 1])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            add_scaled(ParameterVector([1]), ParameterVector([1, 2]), 1.0)

    def test_overflow_is_numeric_error(self):
        with pytest.raises(NumericError):
            add_scaled(ParameterVector([1e308]), ParameterVector([1e308]), 1e308)

    @given(
        st.lists(st.floats(min_value=-1e100, max_value=1e100), min_size=1, max_size=16),
        st.floats(min_value=-1e100, max_value=1e100),
    )
    def test_never_nan_for_bounded_inputs(self, values, coeff):
        a = ParameterVector(values)
        b = ParameterVector(list(reversed(values)))
        out = add_scaled(a, b, coeff)
        assert np.all(np.isfinite(out.values))


class TestL2Distance:
    def test_identical_vectors(self):
        assert l2_distance(ParameterVector([1, 1]), ParameterVector([1, 1])) == 0.0

    def test_pythagorean(self):
        # oracle: sqrt(3^2 + 4^2) = 5
        assert l2_distance(ParameterVector([0, 0]), ParameterVector([3, 4])) == 5.0

    def test_scalar_absolute_difference(self):
        # oracle: |2 - (-2)| = 4
        assert l2_distance(ParameterVector([2]), ParameterVector([-2])) == 4.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            l2_distance(ParameterVector([1]), ParameterVector([1, 2]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50)
    def test_symmetry_and_triangle(self, seed):
        rng = np.random.default_rng(seed)
        a, b, c = (ParameterVector(rng.standard_normal(6)) for _ in range(3))
        assert l2_distance(a, b) == l2_distance(b, a)
        slack = 1e-12 * (1 + l2_distance(a, b) + l2_distance(b, c))
        assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + slack

    def test_zero_iff_equal(self):
        rng = np.random.default_rng(7)
        a = ParameterVector(rng.standard_normal(5))
        b = ParameterVector(a.values + 1e-12)
        assert l2_distance(a, b) > 0


class TestDiceScore:
    def test_identical_non_empty_masks(self):
        assert dice_score([1, 0, 1, 1], [1, 0, 1, 1]) == 1.0

    def test_disjoint_masks(self):
        assert dice_score([1, 1, 0, 0], [0, 0, 1, 1]) == 0.0

    def test_counting_example(self):
        # oracle: |A|=4, |B|=6, |A∩B|=3 -> 2*3/10 = 0.6
        a = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        b = [1, 1, 1, 0, 1, 1, 1, 0, 0, 0]
        assert brute_force_dice(a, b) == 0.6
        assert dice_score(a, b) == 0.6

    def test_both_empty_is_one(self):
        assert dice_score([0, 0], [0, 0]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            dice_score([1, 0], [1, 0, 1])

    def test_non_binary_entry(self):
        with pytest.raises(DomainError):
            dice_score([1, 2], [1, 0])
        with pytest.raises(DomainError):
            dice_score([1, 0], [0.5, 0])

    @given(st.integers(0, 2**32 - 1), st.integers(1, 64))
    @settings(max_examples=100)
    def test_matches_counting_oracle(self, seed, length):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, size=length).tolist()
        b = rng.integers(0, 2, size=length).tolist()
        assert dice_score(a, b) == brute_force_dice(a, b)
        assert dice_score(a, b) == dice_score(b, a)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30)
    def test_self_dice_is_one_for_non_empty(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.integers(0, 2, size=16)
        m[rng.integers(0, 16)] = 1
        assert dice_score(m, m) == 1.0
