import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import binom

from monotone_link import (
    KnotGrid,
    LinkCoefficients,
    LinkSupportError,
    basis_matrix,
    coefficient_count,
    covariate_effect,
    eval_hat_basis,
    eval_integrated_basis,
    eval_link,
    integrated_basis_matrix,
)


class TestKnotGrid:
    def test_knots_are_equispaced_on_unit_interval(self):
        grid = KnotGrid(10)
        np.testing.assert_allclose(grid.knots, np.linspace(-1.0, 1.0, 11), atol=1e-15)
        assert grid.delta == pytest.approx(0.2)

    def test_rejects_single_interval(self):
        with pytest.raises(ValueError):
            KnotGrid(1)


class TestIntegratedBasis:
    @pytest.mark.parametrize("L", [2, 10, 30])
    def test_matches_quadrature_of_hat(self, L):
        grid = KnotGrid(L)
        xs = np.linspace(-1.0, 1.0, 100)[1:]
        for l in (0, L // 2, L):
            expected = [
                quad(lambda t: eval_hat_basis(grid, l, t), -1.0, x, epsabs=1e-13, epsrel=1e-12, limit=200)[0]
                for x in xs
            ]
            got = integrated_basis_matrix(grid, xs)[:, l]
            np.testing.assert_allclose(got, expected, atol=1e-8)

    def test_hat_peaks_at_its_knot(self):
        grid = KnotGrid(8)
        assert eval_hat_basis(grid, 3, grid.knots[3]) == pytest.approx(1.0)
        assert eval_hat_basis(grid, 3, grid.knots[5]) == 0.0

    @pytest.mark.parametrize("kind", ["monotone_gp", "bernstein", "identity"])
    def test_link_vanishes_at_left_end(self, kind):
        grid = KnotGrid(12)
        xi = np.random.default_rng(0).uniform(0.0, 2.0, coefficient_count(kind, grid))
        assert eval_link(LinkCoefficients(kind, xi), grid, -1.0) == 0.0

    @pytest.mark.parametrize("kind", ["monotone_gp", "bernstein"])
    def test_nonnegative_coefficients_give_monotone_link(self, kind):
        grid = KnotGrid(15)
        xi = np.random.default_rng(1).exponential(size=grid.L + 1)
        values = eval_link(LinkCoefficients(kind, xi), grid, np.linspace(-1.0, 1.0, 400))
        assert np.all(np.diff(values) >= -1e-12)

    def test_first_integrated_column_is_a_half_hat(self):
        grid = KnotGrid(4)
        assert eval_integrated_basis(grid, 0, 1.0) == pytest.approx(0.5 * grid.delta)
        assert eval_integrated_basis(grid, 2, 1.0) == pytest.approx(grid.delta)


class TestOtherBases:
    def test_bernstein_increments_reproduce_bernstein_polynomial(self):
        grid = KnotGrid(6)
        xi = np.array([0.0, 0.3, 0.1, 0.0, 0.5, 0.2, 0.4])
        x = np.linspace(-1.0, 1.0, 50)
        y = 0.5 * (x + 1.0)
        levels = np.cumsum(xi)
        expected = sum(levels[k] * binom.pmf(k, grid.L, y) for k in range(grid.L + 1))
        np.testing.assert_allclose(basis_matrix("bernstein", grid, x) @ xi, expected, atol=1e-12)

    def test_identity_is_shifted_line(self):
        grid = KnotGrid(4)
        assert coefficient_count("identity", grid) == 1
        assert eval_link(LinkCoefficients("identity", np.array([2.5])), grid, 0.2) == pytest.approx(3.0)

    def test_unknown_kind_is_rejected(self):
        with pytest.raises(ValueError, match="Unknown link kind"):
            basis_matrix("spline", KnotGrid(4), np.zeros(2))


class TestSupport:
    def test_index_outside_support_raises(self):
        with pytest.raises(LinkSupportError, match="index out of link support"):
            integrated_basis_matrix(KnotGrid(5), np.array([0.0, 1.01]))

    def test_rounding_slack_is_tolerated(self):
        out = integrated_basis_matrix(KnotGrid(5), np.array([1.0 + 1e-12]))
        np.testing.assert_allclose(out, integrated_basis_matrix(KnotGrid(5), np.array([1.0])))


class TestCovariateEffect:
    def test_zero_coefficient_has_no_effect(self):
        coef = LinkCoefficients("monotone_gp", np.ones(6))
        assert covariate_effect(coef, KnotGrid(5), np.array([0.0, 1.0]), 0) == 1.0

    def test_identity_link_effect_is_exponential_slope(self):
        coef = LinkCoefficients("identity", np.array([2.0]))
        beta = np.array([0.6, -0.8])
        assert covariate_effect(coef, KnotGrid(5), beta, 1) == pytest.approx(np.exp(-1.6))

    def test_clipped_drops_negative_coefficients(self):
        coef = LinkCoefficients("bernstein", np.array([0.1, -0.2, 0.3])).clipped()
        np.testing.assert_array_equal(coef.xi, [0.1, 0.0, 0.3])
