import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayes_triplet import GaussianEmbedding, TauMoments, Triplet, tau_mean, tau_moments, tau_variance
from bayes_triplet.mc import estimate_moments, random_triplet, sample_tau
from bayes_triplet.moments import tau_mean_arrays, tau_variance_arrays, tau_variance_compact

from conftest import triplet_from, triplets


def swap(t):
    return Triplet(t.anchor, t.negative, t.positive)


class TestTauMoments:
    def test_rejects_negative_variance(self):
        with pytest.raises(ValueError):
            TauMoments(0.0, -1.0, 1)

    def test_std(self):
        assert TauMoments(1.0, 4.0, 3).std == 2.0


class TestTauMean:
    def test_identical_positive_negative(self):
        t = triplet_from([[0.3, -1.0], [1.0, 2.0], [1.0, 2.0]], [0.2, 0.7, 0.7])
        assert tau_mean(t) == 0.0

    def test_deterministic_limit(self):
        t = triplet_from([[0.0, 0.0], [1.0, 0.0], [0.0, 3.0]], [0.0, 0.0, 0.0])
        assert tau_mean(t) == 1.0 - 9.0

    def test_variance_counts_once_per_dimension(self):
        t = triplet_from([np.zeros(5)] * 3, [0.0, 0.3, 0.1])
        assert tau_mean(t) == pytest.approx(5 * 0.2)

    def test_against_monte_carlo_d16(self):
        t = random_triplet(16, np.random.default_rng(3))
        est = estimate_moments(sample_tau(t, 1_000_000, seed=3))
        assert abs(est.mean - tau_mean(t)) < 4 * est.se_mean


class TestTauVariance:
    def test_deterministic_is_zero(self):
        t = triplet_from([[1.0, 2.0], [0.0, 1.0], [3.0, 3.0]], [0.0, 0.0, 0.0])
        assert tau_variance(t) == 0.0

    def test_origin_unit_variances_is_twelve(self):
        t = triplet_from([[0.0], [0.0], [0.0]], [1.0, 1.0, 1.0])
        assert tau_variance(t) == 12.0

    def test_origin_unit_variances_brute_force(self):
        t = triplet_from([[0.0], [0.0], [0.0]], [1.0, 1.0, 1.0])
        est = estimate_moments(sample_tau(t, 10_000_000, seed=11, method="direct"))
        assert abs(est.variance - 12.0) < 4 * est.se_variance

    def test_against_monte_carlo_d128(self):
        t = random_triplet(128, np.random.default_rng(5))
        est = estimate_moments(sample_tau(t, 1_000_000, seed=5))
        assert abs(est.variance - tau_variance(t)) < 4 * est.se_variance

    def test_zero_only_when_all_variances_zero(self):
        t = triplet_from([[0.0], [0.0], [0.0]], [0.0, 0.0, 1e-3])
        assert tau_variance(t) > 0

    @given(triplets())
    def test_matches_nonnegative_regrouping(self, t):
        args = (t.anchor.mean, t.positive.mean, t.negative.mean, t.anchor.variance, t.positive.variance, t.negative.variance)
        np.testing.assert_allclose(tau_variance_arrays(*args), tau_variance_compact(*args), rtol=1e-9, atol=1e-9)


class TestTauMomentsComposite:
    def test_deterministic(self):
        mo = tau_moments(triplet_from([[0.0], [2.0], [1.0]], [0.0, 0.0, 0.0]))
        assert (mo.mean, mo.variance, mo.dimension) == (3.0, 0.0, 1)

    def test_batched_kernels_match_scalar(self, rng):
        ts = [random_triplet(6, rng) for _ in range(5)]
        stack = lambda f: np.array([f(t) for t in ts])
        mus = [stack(lambda t, r=r: getattr(t, r).mean) for r in ("anchor", "positive", "negative")]
        vs = [stack(lambda t, r=r: getattr(t, r).variance) for r in ("anchor", "positive", "negative")]
        np.testing.assert_allclose(tau_mean_arrays(*mus, *vs), [tau_mean(t) for t in ts], rtol=1e-13)
        np.testing.assert_allclose(tau_variance_arrays(*mus, *vs), [tau_variance(t) for t in ts], rtol=1e-13)


class TestProperties:
    @given(triplets())
    def test_swap_negates_mean_keeps_variance(self, t):
        a, b = tau_moments(t), tau_moments(swap(t))
        assert b.mean == pytest.approx(-a.mean, rel=1e-12, abs=1e-9)
        assert b.variance == pytest.approx(a.variance, rel=1e-12, abs=1e-9)

    @given(triplets(min_dim=2), st.randoms(use_true_random=False))
    def test_coordinate_permutation(self, t, r):
        perm = list(range(t.dim))
        r.shuffle(perm)
        permuted = Triplet(*(GaussianEmbedding(e.mean[perm], e.variance, exact=True) for e in (t.anchor, t.positive, t.negative)))
        assert tau_variance(permuted) == pytest.approx(tau_variance(t), rel=1e-12, abs=1e-9)

    @given(triplets(), st.floats(0.1, 5.0))
    def test_homogeneity(self, t, c):
        scaled = Triplet(*(GaussianEmbedding(c * e.mean, c * c * e.variance, exact=True) for e in (t.anchor, t.positive, t.negative)))
        assert tau_mean(scaled) == pytest.approx(c**2 * tau_mean(t), rel=1e-9, abs=1e-9 * c**2)
        assert tau_variance(scaled) == pytest.approx(c**4 * tau_variance(t), rel=1e-9, abs=1e-9)
