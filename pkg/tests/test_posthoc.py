import numpy as np
import pytest
from scipy.stats import norm

from conditionals import build_context, tooth_effects
from mcmc_engine import PosteriorDraw, init_state
from monotone_link import KnotGrid
from posthoc import (
    PredictiveModel,
    ProbabilityCurves,
    covariate_effects,
    estimate_sop,
    estimate_tp,
    residuals,
    sample_predictive,
    select_knot_count,
    state_paths,
    summarize_link,
    waic,
)


def make_draw(xi=(0.5,), s2=0.04, sigma=0.0, alpha=(2.0, 3.0, 1.0), phi=0.5, beta=(0.6, 0.8)):
    return PosteriorDraw(
        beta=np.array(beta), xi=np.array(xi), tau2=1.0, sigma_b=np.array([[sigma]]),
        alpha=np.array(alpha), pi=np.array([1.0]), phi=np.array([phi]), s2=np.array([s2]), gamma=1.0,
    )


@pytest.fixture
def linear_model():
    return PredictiveModel("identity", KnotGrid(4), np.ones((2, 1)))


class TestPredictive:
    def test_point_mass_without_noise(self, linear_model, rng):
        draw = make_draw(s2=0.0)
        x = np.array([0.3, 0.1])
        t_total, r = sample_predictive(draw, linear_model, x, 0, 100, rng)
        expected = np.exp(0.5 * (x @ draw.beta + 1.0) + 0.5)
        np.testing.assert_allclose(t_total, expected)
        np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)

    def test_log_time_mean_and_increment_mean(self, linear_model, rng):
        draw = make_draw(s2=0.25, sigma=0.1)
        x = np.array([-0.2, 0.4])
        t_total, r = sample_predictive(draw, linear_model, x, 1, 100_000, rng)
        assert np.log(t_total).mean() == pytest.approx(0.5 * (x @ draw.beta + 1.0) + 0.5, abs=3 * np.sqrt(0.35 / 1e5) + 1e-3)
        np.testing.assert_allclose(r.mean(axis=0), draw.alpha / draw.alpha.sum(), atol=5e-3)

    def test_state_paths_start_healthy(self):
        t_total = np.array([2.0, 5.0])
        r = np.array([[0.5, 0.25, 0.25], [0.2, 0.2, 0.6]])
        paths = state_paths(t_total, r, np.array([0.0, 1.0, 1.5, 2.0, 100.0]))
        np.testing.assert_array_equal(paths[0], [0, 1, 2, 3, 3])
        np.testing.assert_array_equal(paths[1], [0, 1, 1, 2, 3])


class TestOccupationCurves:
    def test_partition_and_monotone_absorption(self, linear_model, rng):
        draws = [make_draw(), make_draw(phi=1.0, s2=0.5)]
        curves = estimate_sop(draws, linear_model, np.array([0.1, 0.2]), 0, np.linspace(0, 20, 41), 2000, rng)
        np.testing.assert_allclose(curves.per_draw.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(curves.per_draw[:, 0, 0], 1.0)
        assert np.all(np.diff(curves.per_draw[..., -1], axis=1) >= 0)

    def test_absorption_matches_lognormal_cdf(self, linear_model, rng):
        draw = make_draw(s2=0.3, sigma=0.2)
        x = np.array([0.5, -0.3])
        B = 40_000
        times = np.array([1.0, 2.0, 4.0])
        curves = estimate_sop([draw], linear_model, x, 0, times, B, rng)
        mean = 0.5 * (x @ draw.beta + 1.0) + 0.5
        exact = norm.cdf((np.log(times) - mean) / np.sqrt(0.5))
        tol = 4 * np.sqrt(exact * (1 - exact) / B)
        assert np.all(np.abs(curves.per_draw[0, :, -1] - exact) < tol)

    def test_bad_grid_is_rejected(self, linear_model, rng):
        with pytest.raises(ValueError):
            estimate_sop([make_draw()], linear_model, np.zeros(2), 0, [1.0, 0.5], 10, rng)


class TestTransitionCurves:
    def test_rows_normalize_and_start_on_diagonal(self, linear_model, rng):
        curves = estimate_tp([make_draw(s2=0.5)], linear_model, np.zeros(2), 0, 1.5, np.arange(0.0, 6.0), 5000, rng)
        labels = list(curves.labels)
        for r_ in range(4):
            cols = [labels.index(f"{r_}-{s_}") for s_ in range(r_, 4)]
            block = curves.per_draw[0][:, cols]
            if np.all(np.isnan(block)):
                continue
            np.testing.assert_allclose(block.sum(axis=1), 1.0, atol=1e-12)
            assert block[0, 0] == 1.0

    def test_unreachable_state_is_missing(self, linear_model, rng):
        # every subject is absorbed long before u, so states below K never condition
        draw = make_draw(phi=-5.0, s2=1e-4)
        curves = estimate_tp([draw], linear_model, np.zeros(2), 0, 50.0, np.array([0.0, 1.0]), 500, rng)
        assert np.all(np.isnan(curves.per_draw[0][:, curves.labels.index("0-1")]))
        assert np.all(curves.per_draw[0][:, curves.labels.index("3-3")] == 1.0)
        frame = curves.to_frame()
        assert frame.loc[frame["state_or_transition"] == "0-0", "n_effective"].eq(0).all()

    def test_matches_brute_force_enumeration(self, linear_model, rng):
        draw = make_draw(s2=0.3)
        u, offsets = 1.0, np.array([0.0, 0.5, 1.5, 3.0])
        B = 100_000
        curves = estimate_tp([draw], linear_model, np.zeros(2), 0, u, offsets, B, rng)

        count = 400_000
        oracle_rng = np.random.default_rng(99)
        total = np.exp(1.0 + np.sqrt(0.3) * oracle_rng.standard_normal(count))
        increments = oracle_rng.dirichlet(draw.alpha, count)

        def state_at(t):
            state = np.zeros(count, dtype=int)
            entered = 0.0
            for k in range(draw.alpha.size):
                entered = entered + increments[:, k]
                state += total * np.minimum(entered, 1.0) <= t
            return state

        start = state_at(u)
        for a, t in enumerate(offsets):
            later = state_at(u + t)
            for c, label in enumerate(curves.labels):
                from_state, to_state = (int(v) for v in label.split("-"))
                occupied = start == from_state
                share = occupied.mean()
                if share < 0.02:
                    continue
                p = np.mean(later[occupied] == to_state)
                se = np.sqrt(p * (1 - p) * (1 / (share * B) + 1 / occupied.sum()))
                assert abs(curves.per_draw[0, a, c] - p) < 4.0 * se + 1e-3, label

    def test_negative_baseline_is_rejected(self, linear_model, rng):
        with pytest.raises(ValueError):
            estimate_tp([make_draw()], linear_model, np.zeros(2), 0, -1.0, [0.0], 10, rng)


class TestBands:
    def test_bands_contain_mean_and_stay_in_unit_interval(self, rng):
        per_draw = rng.uniform(size=(40, 5, 2))
        curves = ProbabilityCurves("SOP", ("0", "1"), np.arange(5.0), per_draw)
        lo, hi = curves.bands()
        mean = curves.mean()
        assert np.all(lo <= mean) and np.all(mean <= hi)
        assert np.all(lo >= 0) and np.all(hi <= 1)
        assert list(curves.to_frame().columns) == ["kind", "state_or_transition", "t", "mean", "lo95", "hi95", "n_effective"]


class TestWaic:
    def test_identical_rows_have_no_penalty(self):
        ll = np.tile(np.log([0.2, 0.5, 0.9]), (4, 1))
        result = waic(ll)
        assert result.p_waic == 0.0
        assert result.waic == pytest.approx(-2.0 * np.log([0.2, 0.5, 0.9]).sum())

    def test_hand_computed_matrix(self):
        ll = np.log([[0.5, 0.25], [0.25, 0.5]])
        result = waic(ll)
        assert result.lppd.sum() == pytest.approx(2 * np.log(0.375))
        assert result.p_waic == pytest.approx(2 * np.var(np.log([0.5, 0.25]), ddof=1))
        assert result.waic == pytest.approx(-2 * (2 * np.log(0.375) - result.p_waic))
        assert result.elpd == pytest.approx(-0.5 * result.waic)

    def test_nonfinite_point_is_named(self):
        ll = np.zeros((3, 4))
        ll[1, 2] = -np.inf
        with pytest.raises(ValueError, match="point 2"):
            waic(ll)

    def test_needs_two_draws(self):
        with pytest.raises(ValueError):
            waic(np.zeros((1, 3)))


class TestKnotSelection:
    def test_prefers_smaller_count_within_window(self):
        assert select_knot_count({30: 100.0, 35: 95.0}) == 30

    def test_single_entry(self):
        assert select_knot_count({20: 1.0}) == 20

    def test_clear_winner_at_largest_count(self):
        assert select_knot_count({10: 200.0, 20: 150.0, 30: 100.0}) == 30


class TestLinkAndEffects:
    def test_link_summary_is_monotone(self):
        model = PredictiveModel("monotone_gp", KnotGrid(6), np.ones((2, 1)))
        rng = np.random.default_rng(3)
        draws = [make_draw(xi=rng.exponential(size=7)) for _ in range(20)]
        frame = summarize_link(draws, model, points=50)
        assert list(frame.columns) == ["x", "mean", "lo95", "hi95"]
        assert frame["mean"].iloc[0] == 0.0
        assert np.all(np.diff(frame["mean"]) >= 0)
        assert np.all(frame["lo95"] <= frame["hi95"])

    def test_linear_effect_multiplier(self, linear_model):
        draws = [make_draw(xi=(2.0,)) for _ in range(5)]
        frame = covariate_effects(draws, linear_model, ["age", "smoker"])
        np.testing.assert_allclose(frame["multiplier"], np.exp(2.0 * np.array([0.6, 0.8])))

    def test_residuals_vanish_without_noise(self, small_dataset, small_model, rng):
        ctx = build_context(small_dataset, small_model)
        state = init_state(small_dataset, small_model, rng, ctx=ctx)
        state.log_t = ctx.link_at(state.beta, state.xi) + tooth_effects(state, ctx) + state.mixture.tooth_means()
        np.testing.assert_allclose(residuals(state, ctx), 0.0, atol=1e-6)
