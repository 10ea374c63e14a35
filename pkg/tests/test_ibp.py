import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from ibpd.ibp import IBPConfig, expected_active, sample_prior, sticks_to_pi
from ibpd.tensor import Parameter, backward


def independent_counts(cfg, draws, rng):
    """Active-feature count of one row per independent prior draw."""
    return np.array([sample_prior(cfg, 1, rng)[1].sum() for _ in range(draws)])


class TestConfig:
    @pytest.mark.parametrize("kw", [{"K": 0}, {"alpha": 0.0}, {"beta": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            IBPConfig(**kw)


class TestSticksToPi:
    def test_cumulative_product(self):
        np.testing.assert_allclose(sticks_to_pi(np.array([0.5, 0.5, 0.2])).data, [0.5, 0.25, 0.05])

    @pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
    def test_domain(self, bad):
        with pytest.raises(ValueError):
            sticks_to_pi(np.array([0.5, bad]))

    def test_gradient(self, rng):
        nu = Parameter(rng.uniform(0.2, 0.9, size=5), "nu")
        w = rng.normal(size=5)

        def f():
            return (sticks_to_pi(nu) * w).sum()

        backward(f())
        assert rel_err(nu.grad, numeric_grad(lambda: f().item(), nu.data)) < 1e-7

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-3, 1 - 1e-3), min_size=1, max_size=30))
    def test_monotone_non_increasing(self, nus):
        pi = sticks_to_pi(np.array(nus)).data
        assert np.all(np.diff(pi) <= 1e-15)
        assert np.all((pi > 0) & (pi < 1))


class TestExpectedActive:
    def test_single_stick(self):
        assert expected_active(IBPConfig(alpha=1.0, K=1)) == pytest.approx(0.5)

    def test_geometric_limit(self):
        assert abs(expected_active(IBPConfig(alpha=1.0, K=1000)) - 1.0) < 1e-3

    def test_general_beta_matches_simulation(self, rng):
        cfg = IBPConfig(alpha=3.0, beta=2.0, K=20)
        counts = independent_counts(cfg, 5000, rng)
        assert abs(counts.mean() - expected_active(cfg)) < 3 * counts.std() / np.sqrt(counts.size) + 1e-9


class TestSamplePrior:
    def test_shapes_and_binary(self, rng):
        state, Z = sample_prior(IBPConfig(K=7), 11, rng)
        assert Z.shape == (11, 7) and state.nu.shape == (7,)
        assert set(np.unique(Z)) <= {0.0, 1.0}

    def test_saturated_stick(self, rng):
        _, Z = sample_prior(IBPConfig(alpha=1e4, K=1), 500, rng)
        assert Z.mean() > 0.99

    def test_rows_share_sticks(self, rng):
        state, Z = sample_prior(IBPConfig(alpha=5.0, K=30), 20000, rng)
        np.testing.assert_allclose(Z.mean(axis=0), state.pi, atol=0.02)

    def test_rejects_empty(self, rng):
        with pytest.raises(ValueError):
            sample_prior(IBPConfig(), 0, rng)

    def test_seeded_determinism(self):
        a = sample_prior(IBPConfig(), 4, np.random.default_rng(3))[1]
        b = sample_prior(IBPConfig(), 4, np.random.default_rng(3))[1]
        np.testing.assert_array_equal(a, b)
