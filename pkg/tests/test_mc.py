import numpy as np
import pytest
from scipy import stats

from bayes_triplet import (
    TauMoments,
    estimate_moments,
    ks_distance,
    run_approximation_study,
    sample_tau,
    tau_moments,
)
from bayes_triplet.mc import ApproxStudyReport, chi2_decomposition, exceedance_fraction, random_triplet

from conftest import triplet_from


class TestSampleTau:
    def test_deterministic_triplet(self):
        t = triplet_from([[0.0, 1.0], [1.0, 1.0], [0.0, 3.0]], [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(sample_tau(t, 100, seed=0), np.full(100, 1.0 - 4.0))

    def test_identical_positive_negative_centered(self):
        t = triplet_from([[0.5, 0.0], [1.0, 2.0], [1.0, 2.0]], [0.3, 0.6, 0.6])
        est = estimate_moments(sample_tau(t, 400_000, seed=1))
        assert abs(est.mean) < 4 * est.se_mean

    def test_reproducible(self):
        t = random_triplet(5, np.random.default_rng(0))
        np.testing.assert_array_equal(sample_tau(t, 20_000, seed=(3, 4)), sample_tau(t, 20_000, seed=(3, 4)))
        assert not np.array_equal(sample_tau(t, 100, seed=1), sample_tau(t, 100, seed=2))

    def test_bad_arguments(self):
        t = random_triplet(2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_tau(t, 0)
        with pytest.raises(ValueError):
            sample_tau(t, 10, method="bootstrap")

    @pytest.mark.parametrize("dim", [1, 3, 40])
    def test_chi2_and_direct_agree(self, dim):
        t = random_triplet(dim, np.random.default_rng(dim))
        direct = sample_tau(t, 100_000, seed=5, method="direct")
        chi2 = sample_tau(t, 100_000, seed=6, method="chi2")
        assert stats.ks_2samp(direct, chi2).pvalue > 1e-3

    def test_chi2_needs_two_variances(self):
        t = triplet_from([[0.0], [1.0], [2.0]], [0.0, 0.0, 1.0])
        assert chi2_decomposition(t) is None
        with pytest.raises(ValueError):
            sample_tau(t, 10, method="chi2")

    def test_chi2_decomposition_reproduces_moments(self):
        # tau = sum_j w_j X_j + c with X_j ~ ncx2(D, nc_j): mean D w + w nc, var 2 w^2 (D + 2 nc)
        t = random_triplet(7, np.random.default_rng(2))
        lam, nonc, const = chi2_decomposition(t)
        mo = tau_moments(t)
        assert (lam * (7 + nonc)).sum() + const == pytest.approx(mo.mean, rel=1e-10, abs=1e-10)
        assert (2 * lam**2 * (7 + 2 * nonc)).sum() == pytest.approx(mo.variance, rel=1e-10)

    def test_exceedance(self):
        assert exceedance_fraction([-3.0, -1.0, 0.0, 2.0], 0.5) == 0.5


class TestEstimateMoments:
    def test_normal_samples(self, rng):
        est = estimate_moments(rng.normal(2.0, 3.0, 1_000_000))
        assert abs(est.mean - 2.0) < 4 * est.se_mean
        assert abs(est.variance - 9.0) < 4 * est.se_variance
        # for Gaussian data SE(var) = var sqrt(2 / n)
        assert est.se_variance == pytest.approx(9.0 * np.sqrt(2 / 1e6), rel=0.02)


class TestKsDistance:
    def test_exact_normal_below_quantile(self, rng):
        n = 100_000
        assert ks_distance(rng.normal(1.0, 2.0, n), TauMoments(1.0, 4.0, 1)) < 1.63 / np.sqrt(n)

    def test_constant_samples(self):
        assert ks_distance(np.full(1000, 3.0), TauMoments(3.0, 1.0, 1)) >= 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            ks_distance([1.0], TauMoments(0.0, 1.0, 1))
        with pytest.raises(ValueError):
            ks_distance([1.0, 2.0], TauMoments(0.0, 0.0, 1))

    def test_low_dimension_worse(self):
        ks = {}
        for dim in (1, 128):
            vals = []
            for i in range(5):
                t = random_triplet(dim, np.random.default_rng([dim, i]))
                vals.append(ks_distance(sample_tau(t, 100_000, seed=(dim, i)), tau_moments(t)))
            ks[dim] = np.median(vals)
        assert ks[1] > 5 * ks[128]


class TestStudy:
    def test_reproducible_and_serialisable(self):
        a = run_approximation_study(dims=(1, 4), trials_per_dim=2, n_samples=2000, seed=3)
        b = run_approximation_study(dims=(1, 4), trials_per_dim=2, n_samples=2000, seed=3)
        assert a.to_json() == b.to_json() and a.to_csv() == b.to_csv()
        assert ApproxStudyReport.from_json(a.to_json()).to_json() == a.to_json()
        assert len(a.rows) == 4 and a.dims() == [1, 4]

    def test_row_invariants(self):
        rep = run_approximation_study(dims=(2, 16), trials_per_dim=3, n_samples=5000, seed=0)
        for r in rep.rows:
            assert 0.0 <= r.ks <= 1.0 and r.n == 5000
        assert rep.moment_z_scores().shape == (6, 2)

    def test_empty_dims(self):
        with pytest.raises(ValueError):
            run_approximation_study(dims=())
