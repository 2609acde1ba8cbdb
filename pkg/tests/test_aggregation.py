import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkit import (
    AlgorithmConfig,
    ConfigError,
    DimensionError,
    EmptyAggregationError,
    ModelUpdate,
    ParameterVector,
    ProtocolError,
    ditto_personal_step,
    federated_average,
    proximal_loss_gradient,
)


def update(values, n=1, round_index=0, client="c"):
    return ModelUpdate(client, round_index, ParameterVector(values), n)


def weighted_mean_oracle(updates, weighting):
    """Independent brute-force oracle: plain Python loops over Σ n_k w_k / Σ n."""
    dim = updates[0].params.dim
    weights = [u.sample_count if weighting == "sample_count" else 1 for u in updates]
    total = sum(weights)
    out = []
    for j in range(dim):
        acc = 0.0
        for u, w in zip(updates, weights):
            acc += w * float(u.params.values[j])
        out.append(acc / total)
    return out


class TestAlgorithmConfig:
    def test_fedavg_requires_zero_coefficients(self):
        with pytest.raises(ConfigError):
            AlgorithmConfig(kind="fedavg", prox_mu=0.5)
        with pytest.raises(ConfigError):
            AlgorithmConfig(kind="fedavg", ditto_lambda=1.0)

    def test_negative_coefficients_rejected(self):
        with pytest.raises(ConfigError):
            AlgorithmConfig(kind="fedprox", prox_mu=-1.0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            AlgorithmConfig(kind="fedsgd")


class TestFederatedAverage:
    def test_symmetric_mean(self):
        out = federated_average([update([1, 3]), update([3, 5])], "uniform")
        assert out == ParameterVector([2, 4])

    def test_sample_count_weighting(self):
        # oracle: (1*[0,0] + 3*[4,8]) / 4 = [3, 6]
        ups = [update([0, 0], n=1), update([4, 8], n=3)]
        assert weighted_mean_oracle(ups, "sample_count") == [3.0, 6.0]
        assert federated_average(ups, "sample_count") == ParameterVector([3, 6])

    def test_single_update_unchanged(self):
        v = ParameterVector([0.1, -2.7, 3.3])
        assert federated_average([update(v.values, n=5)]) == v

    def test_empty_list(self):
        with pytest.raises(EmptyAggregationError):
            federated_average([])

    def test_mixed_dims(self):
        with pytest.raises(DimensionError):
            federated_average([update([1, 2]), update([1, 2, 3])])

    def test_mixed_rounds(self):
        with pytest.raises(ProtocolError):
            federated_average([update([1], round_index=0), update([1], round_index=1)])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100)
    def test_matches_brute_force_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 11))
        dim = int(rng.integers(1, 65))
        weighting = "sample_count" if rng.integers(0, 2) else "uniform"
        ups = [
            update(rng.uniform(-10, 10, dim), n=int(rng.integers(1, 100)), client=f"c{i}")
            for i in range(k)
        ]
        got = federated_average(ups, weighting).values
        want = weighted_mean_oracle(ups, weighting)
        assert np.allclose(got, want, rtol=0, atol=1e-12)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 8))
    @settings(max_examples=50)
    def test_n_copies_returns_vector_exactly(self, seed, k):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(5) * (10.0 ** float(rng.integers(-3, 4)))
        ups = [update(v, client=f"c{i}") for i in range(k)]
        assert federated_average(ups, "uniform") == ParameterVector(v)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100)
    def test_convex_envelope(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(1, 10))
        vecs = [rng.standard_normal(4) for _ in range(k)]
        ups = [update(v, n=int(rng.integers(1, 50)), client=f"c{i}") for i, v in enumerate(vecs)]
        out = federated_average(ups).values
        assert np.all(out >= np.min(vecs, axis=0))
        assert np.all(out <= np.max(vecs, axis=0))

    @given(st.integers(0, 2**32 - 1), st.integers(1, 10000))
    @settings(max_examples=50)
    def test_equal_counts_equals_uniform_bitwise(self, seed, n):
        rng = np.random.default_rng(seed)
        vecs = [rng.standard_normal(6) for _ in range(int(rng.integers(2, 9)))]
        by_count = federated_average(
            [update(v, n=n, client=f"c{i}") for i, v in enumerate(vecs)], "sample_count"
        )
        uniform = federated_average(
            [update(v, n=1, client=f"c{i}") for i, v in enumerate(vecs)], "uniform"
        )
        assert by_count == uniform


class TestProximalLossGradient:
    def test_mu_zero_returns_gradient_bit_identical(self):
        g = ParameterVector([0.1, -0.7, 12.0])
        out = proximal_loss_gradient(g, ParameterVector([5, 5, 5]), ParameterVector([1, 2, 3]), 0.0)
        assert out is g

    def test_pull_toward_global(self):
        # oracle: 0 + 1*(2 - 0) = 2
        out = proximal_loss_gradient(
            ParameterVector([0.0]), ParameterVector([2.0]), ParameterVector([0.0]), 1.0
        )
        assert out == ParameterVector([2.0])

    def test_regularized_quadratic_minimizer(self):
        # minimize 1/2 (w-2)^2 + mu/2 (w-0)^2 with mu=1; closed form (a + mu*g)/(1+mu) = 1.0
        a, g, mu, lr = 2.0, 0.0, 1.0, 0.2
        w = ParameterVector([0.0])
        for _ in range(200):
            local_grad = ParameterVector([w.values[0] - a])
            step = proximal_loss_gradient(local_grad, w, ParameterVector([g]), mu)
            w = ParameterVector(w.values - lr * step.values)
        assert abs(w.values[0] - (a + mu * g) / (1 + mu)) < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            proximal_loss_gradient(
                ParameterVector([1]), ParameterVector([1, 2]), ParameterVector([1]), 1.0
            )


class TestDittoPersonalStep:
    def test_lambda_zero_is_plain_step(self):
        v = ParameterVector([1.0, 2.0])
        g = ParameterVector([0.5, -0.5])
        wg = ParameterVector([9.0, 9.0])
        out = ditto_personal_step(v, g, wg, 0.0, 0.1)
        assert out == ParameterVector(v.values - 0.1 * g.values)

    def test_regularizer_pull(self):
        # oracle: 1 - 0.1*(0 + 2*(1-0)) = 0.8
        out = ditto_personal_step(
            ParameterVector([1.0]), ParameterVector([0.0]), ParameterVector([0.0]), 2.0, 0.1
        )
        assert out == ParameterVector([0.8])

    def test_at_global_equals_plain_step(self):
        wg = ParameterVector([3.0, -1.0])
        g = ParameterVector([0.2, 0.4])
        with_reg = ditto_personal_step(wg, g, wg, 17.0, 0.05)
        plain = ditto_personal_step(wg, g, wg, 0.0, 0.05)
        assert with_reg == plain

    def test_requires_positive_lr(self):
        with pytest.raises(ConfigError):
            ditto_personal_step(
                ParameterVector([1]), ParameterVector([1]), ParameterVector([1]), 1.0, 0.0
            )

    def test_large_lambda_tracks_global(self):
        # On heterogeneous two-site data the personal model stays near the
        # global track when lambda is huge (lambda*lr < 1), and drifts when
        # lambda is zero.
        rng = np.random.default_rng(3)
        lam, lr = 1e6, 5e-7
        targets = [rng.standard_normal(3) + 3.0, rng.standard_normal(3) - 3.0]
        global_model = ParameterVector(rng.standard_normal(3))
        v_hi = v_lo = ParameterVector(np.zeros(3))
        for _ in range(20):
            grad_hi = ParameterVector(v_hi.values - targets[0])
            grad_lo = ParameterVector(v_lo.values - targets[0])
            v_hi = ditto_personal_step(v_hi, grad_hi, global_model, lam, lr)
            v_lo = ditto_personal_step(v_lo, grad_lo, global_model, 0.0, lr)
            dist_hi = np.linalg.norm(v_hi.values - global_model.values)
            dist_lo = np.linalg.norm(v_lo.values - global_model.values)
            assert dist_hi < dist_lo
