import numpy as np
import pytest
from scipy import stats

from gaussian_tools import (
    CirculantEmbedding,
    MaternKernel,
    SamplerError,
    ToeplitzCovariance,
    default_lengthscale,
    ess_step,
    log_normal_interval_mass,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_stationary_gp,
    sample_trunc_beta,
    sample_trunc_normal,
)


class TestMatern:
    def test_unit_at_origin(self):
        assert MaternKernel(0.75, 0.4)(0.0) == 1.0

    def test_half_integer_closed_forms(self):
        r = np.linspace(0.0, 3.0, 31)
        np.testing.assert_allclose(MaternKernel(0.5, 0.7)(r), np.exp(-r / 0.7), rtol=1e-12)
        z = np.sqrt(3.0) * r / 0.7
        np.testing.assert_allclose(MaternKernel(1.5, 0.7)(r), (1.0 + z) * np.exp(-z), rtol=1e-10)

    def test_default_lengthscale_hits_target_correlation(self):
        ell = default_lengthscale(2.0, nu=0.75)
        assert MaternKernel(0.75, ell)(2.0) == pytest.approx(0.05, abs=1e-10)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            MaternKernel(0.0, 1.0)


class TestToeplitz:
    def test_solve_matches_dense(self):
        cov = ToeplitzCovariance.from_kernel(MaternKernel(0.75, 0.5), 12, 0.2)
        rhs = np.random.default_rng(0).standard_normal(12)
        np.testing.assert_allclose(cov.solve(rhs), np.linalg.solve(cov.matrix, rhs), rtol=1e-8)
        assert cov.quad_form(rhs) == pytest.approx(rhs @ np.linalg.solve(cov.matrix, rhs), rel=1e-8)


class TestCirculantEmbedding:
    def _covariance(self, L):
        kernel = MaternKernel(0.75, default_lengthscale(2.0))
        delta = 2.0 / L
        cov = ToeplitzCovariance.from_kernel(kernel, L + 1, delta)
        return cov, CirculantEmbedding(cov.first_row, lag_fn=lambda lags: kernel(delta * lags))

    def test_embedding_at_least_minimal_size(self):
        _, emb = self._covariance(10)
        assert emb.embedding_size >= 20

    def test_empirical_covariance(self, rng):
        cov, emb = self._covariance(10)
        draws = np.stack([emb.sample(2.0, rng) for _ in range(20_000)])
        np.testing.assert_allclose(np.cov(draws.T), 2.0 * cov.matrix, atol=0.12)

    @pytest.mark.slow
    def test_empirical_covariance_within_monte_carlo_error(self, rng):
        cov, emb = self._covariance(30)
        count = 200_000
        draws = np.stack([emb.sample(1.0, rng) for _ in range(count)])
        target = cov.matrix
        se = np.sqrt((target**2 + np.outer(np.diag(target), np.diag(target))) / count)
        assert np.all(np.abs(np.cov(draws.T) - target) < 4.0 * se + 1e-3)

    def test_zero_scale_gives_zeros(self, rng):
        _, emb = self._covariance(6)
        np.testing.assert_array_equal(emb.sample(0.0, rng), np.zeros(7))

    def test_stationary_draw_reuses_a_prebuilt_embedding(self):
        cov, emb = self._covariance(8)
        from_row = sample_stationary_gp(cov.first_row, 1.5, np.random.default_rng(3), lag_fn=emb.lag_fn)
        from_embedding = sample_stationary_gp(emb, 1.5, np.random.default_rng(3))
        np.testing.assert_array_equal(from_row, from_embedding)


class TestEllipticalSlice:
    def test_gaussian_posterior_moments(self, rng):
        # prior N(0, 1), likelihood N(1 | x, 1): posterior N(0.5, 0.5)
        def loglik(x):
            return -0.5 * float((1.0 - x[0]) ** 2)

        x, ll = np.zeros(1), loglik(np.zeros(1))
        chain = np.empty(40_000)
        for k in range(chain.size):
            x, ll = ess_step(x, lambda g: g.standard_normal(1), loglik, rng, current_loglik=ll)
            chain[k] = x[0]
        assert chain.mean() == pytest.approx(0.5, abs=0.03)
        assert chain.var() == pytest.approx(0.5, abs=0.03)

    def test_constant_likelihood_leaves_prior_invariant(self, rng):
        x = np.full(2, 4.0)
        chain = np.empty((20_000, 2))
        for k in range(chain.shape[0]):
            x, _ = ess_step(x, lambda g: g.standard_normal(2), lambda v: 0.0, rng)
            chain[k] = x
        tail = chain[100:]
        np.testing.assert_allclose(tail.mean(axis=0), 0.0, atol=0.05)
        np.testing.assert_allclose(tail.var(axis=0), 1.0, atol=0.06)
        assert abs(np.corrcoef(tail[:-1, 0], tail[1:, 0])[0, 1]) < 0.05

    def test_hard_constraint_is_respected(self, rng):
        def loglik(x):
            return -np.inf if x[0] < 0 else 0.0

        x = np.array([0.5])
        for _ in range(500):
            x, _ = ess_step(x, lambda g: g.standard_normal(1), loglik, rng)
            assert x[0] >= 0

    def test_bracket_collapse(self, rng):
        with pytest.raises(SamplerError, match="ESS bracket collapse"):
            ess_step(np.ones(2), lambda g: g.standard_normal(2), lambda x: -np.inf, rng, current_loglik=0.0, max_shrink=20)


class TestTruncatedNormal:
    def test_draws_follow_truncated_law(self, rng):
        draws = sample_trunc_normal(np.zeros(20_000), 1.0, -0.5, 1.5, rng)
        assert np.all((draws >= -0.5) & (draws <= 1.5))
        law = stats.truncnorm(-0.5, 1.5)
        assert stats.kstest(draws, law.cdf).pvalue > 1e-3

    def test_far_upper_tail(self, rng):
        draws = sample_trunc_normal(np.zeros(5000), 1.0, 12.0, np.inf, rng)
        assert np.all(np.isfinite(draws)) and np.all(draws >= 12.0)
        assert draws.mean() == pytest.approx(stats.truncnorm(12.0, np.inf).mean(), abs=0.01)

    def test_empty_region_raises(self, rng):
        with pytest.raises(SamplerError, match="empty truncation region"):
            sample_trunc_normal(0.0, 1.0, 1.0, 1.0, rng)

    def test_scalar_in_scalar_out(self, rng):
        assert isinstance(sample_trunc_normal(0.0, 1.0, -np.inf, 0.0, rng), float)

    def test_interval_mass_matches_cdf_difference(self):
        a, b = np.array([-1.0, 0.5, 3.0]), np.array([0.5, 2.0, 9.0])
        expected = np.log(stats.norm.cdf(b) - stats.norm.cdf(a))
        np.testing.assert_allclose(log_normal_interval_mass(a, b), expected, rtol=1e-10)


class TestTruncatedBeta:
    def test_draws_follow_truncated_law(self, rng):
        a, b, lo, hi = 2.0, 5.0, 0.3, 0.6
        draws = sample_trunc_beta(np.full(20_000, a), b, lo, hi, rng)
        assert np.all((draws >= lo) & (draws <= hi))
        law = stats.beta(a, b)
        mass = law.cdf(hi) - law.cdf(lo)
        assert stats.kstest(draws, lambda x: (law.cdf(x) - law.cdf(lo)) / mass).pvalue > 1e-3

    def test_upper_tail_interval(self, rng):
        draws = sample_trunc_beta(np.full(2000, 3.0), 3.0, 0.97, 1.0, rng)
        assert np.all((draws >= 0.97) & (draws <= 1.0))

    def test_empty_region_raises(self, rng):
        with pytest.raises(SamplerError):
            sample_trunc_beta(2.0, 2.0, 0.4, 0.4, rng)


class TestDirichlet:
    def test_rows_on_simplex_with_correct_mean(self, rng):
        alpha = np.array([3.0, 4.0, 2.0])
        draws = sample_dirichlet(alpha, rng, size=50_000)
        np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(draws.mean(axis=0), alpha / alpha.sum(), atol=5e-3)

    def test_tiny_concentrations_stay_finite(self, rng):
        draws = sample_dirichlet(np.array([1e-3, 1e-3]), rng, size=1000)
        assert np.all(np.isfinite(draws)) and np.all(draws >= 1e-14)

    def test_empty_batch(self, rng):
        assert sample_dirichlet(np.ones(3), rng, size=0).shape == (0, 3)

    def test_inverse_gamma_mean(self, rng):
        draws = sample_inverse_gamma(np.full(100_000, 5.0), 2.0, rng)
        assert draws.mean() == pytest.approx(0.5, rel=0.02)
