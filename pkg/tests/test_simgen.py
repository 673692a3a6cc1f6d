import numpy as np
import pytest

from config import ChainConfig, get_model_config
from mcmc_engine import observed_states, run_chains
from model_core import validate_dataset
from posthoc import waic
from simgen import (
    ERROR_LAWS,
    LINKS,
    TRUE_BETA,
    FitSummary,
    SimConfig,
    SimTruth,
    calibrate_snr,
    evaluate_metrics,
    generate_dataset,
    run_replicates,
)


class TestTruth:
    def test_true_direction(self):
        np.testing.assert_allclose(TRUE_BETA, [-0.57735, 0.57735, -0.57735], atol=1e-5)

    @pytest.mark.parametrize("name", ["g1", "g2"])
    def test_links_vanish_at_left_end_and_increase(self, name):
        assert LINKS[name](np.array(-1.0)) == pytest.approx(0.0, abs=1e-15)
        assert np.all(np.diff(LINKS[name](np.linspace(-1, 1, 200))) > 0)

    def test_error_law_variances(self):
        assert ERROR_LAWS["gauss_t"].variance == pytest.approx(0.9 * 0.01 + 0.1 * 3.0)
        assert ERROR_LAWS["mixture3"].variance == pytest.approx(0.01 + 2 * 0.25 / 3)

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="Unknown link"):
            SimConfig(n=10, link_id="g3")


class TestCalibration:
    def test_doubling_error_variance_scales_by_root_two(self):
        law = ERROR_LAWS["mixture3"]
        base = calibrate_snr("g1", TRUE_BETA, law, np.random.default_rng(0), draws=100_000)
        doubled = calibrate_snr("g1", TRUE_BETA, law.scaled(np.sqrt(2.0)), np.random.default_rng(0), draws=100_000)
        assert doubled / base == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_constant_link_is_rejected(self, rng):
        with pytest.raises(ValueError, match="zero signal variance"):
            calibrate_snr(lambda x: np.zeros_like(x), TRUE_BETA, ERROR_LAWS["mixture3"], rng, draws=1000)

    def test_stable_across_seeds(self):
        values = [calibrate_snr("g1", TRUE_BETA, ERROR_LAWS["mixture3"], np.random.default_rng(s)) for s in (1, 2)]
        assert values[0] == pytest.approx(values[1], rel=0.01)


class TestGeneration:
    def test_states_follow_from_latent_quantities(self):
        data, truth = generate_dataset(SimConfig(n=40), np.random.default_rng(3))
        np.testing.assert_array_equal(observed_states(truth.log_t, truth.r, np.log(truth.c)), data.s)
        assert validate_dataset(data) == []

    def test_jaw_sides_share_effects(self):
        _, truth = generate_dataset(SimConfig(n=20, m=10), np.random.default_rng(4))
        np.testing.assert_array_equal(truth.b, truth.b[:, ::-1])

    def test_reproducible_under_seed(self):
        a, _ = generate_dataset(SimConfig(n=15, error_id="gauss_t"), np.random.default_rng(9))
        b, _ = generate_dataset(SimConfig(n=15, error_id="gauss_t"), np.random.default_rng(9))
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.c, b.c)
        np.testing.assert_array_equal(a.s, b.s)

    def test_truth_link_on_scoring_grid(self):
        _, truth = generate_dataset(SimConfig(n=5, link_id="g2"), np.random.default_rng(0))
        assert truth.link_grid.size == 100 and truth.link_values[0] == 0.0

    @pytest.mark.parametrize("link_id", ["g1", "g2"])
    def test_state_frequencies(self, link_id):
        data, _ = generate_dataset(SimConfig(n=300, link_id=link_id), np.random.default_rng(21))
        freq = np.bincount(data.s.reshape(-1), minlength=4) / data.s.size
        assert np.all(freq > 0)
        assert freq[0] >= 0.05 and freq[3] >= 0.05


def _truth(link_values):
    return SimTruth(
        beta=TRUE_BETA.copy(), link_constant=1.0, link_grid=np.linspace(-1, 1, 100), link_values=link_values,
        sigma_b=np.eye(1), b=np.zeros((1, 2)), log_t=np.zeros((1, 2)), r=np.zeros((1, 2, 3)),
        c=np.ones((1, 2)), s=np.zeros((1, 2), dtype=int),
    )


class TestMetrics:
    def test_exact_recovery_and_relative_bias(self):
        g = np.linspace(0, 1, 100)
        fits = [
            FitSummary(0, 50, "exact", TRUE_BETA.copy(), TRUE_BETA - 0.1, TRUE_BETA + 0.1, g.copy()),
            FitSummary(0, 50, "shrunk", 0.9 * TRUE_BETA, TRUE_BETA + 0.05, TRUE_BETA + 0.2, g + 0.1),
        ]
        table = evaluate_metrics(fits, {0: _truth(g)})
        assert len(table) == 20
        exact = table[table["model"] == "exact"].set_index(["metric", "parameter"])["value"]
        assert exact["MSE"].eq(0).all() and exact["RB"].eq(0).all() and exact["CP"].eq(1).all()
        shrunk = table[table["model"] == "shrunk"].set_index(["metric", "parameter"])["value"]
        np.testing.assert_allclose(shrunk["RB"], -0.1)
        assert shrunk["CP"].eq(0).all()
        assert shrunk[("MISE", "g")] == pytest.approx(0.01)

    def test_harness_row_count(self):
        cfg = SimConfig(n=6, m=4, replicates=2, seed=1)
        chain = ChainConfig(iterations=8, burn_in=5, b_lik=5)
        table = run_replicates(cfg, ["s-lin-dp"], chain, overrides={"H": 2})
        assert len(table) == 2 * 10
        assert set(table["metric"]) == {"MSE", "RB", "CP", "MISE"}
        assert list(table.columns) == ["replicate", "n", "model", "metric", "parameter", "value"]


@pytest.mark.slow
class TestShortStudy:
    def test_direction_is_recovered_with_finite_metrics(self):
        cfg = SimConfig(n=80, m=4, replicates=2, seed=3)
        chain = ChainConfig(iterations=2000, burn_in=1500, b_lik=20)
        table = run_replicates(cfg, ["s-gp-dp"], chain, overrides={"L": 10, "H": 5})
        assert len(table) == 2 * 10
        assert np.all(np.isfinite(table["value"]))
        mse = table.loc[table["metric"] == "MSE", "value"]
        assert mse.max() < 0.25
        coverage = table.loc[table["metric"] == "CP", "value"]
        assert coverage.isin([0.0, 1.0]).all() and coverage.mean() >= 0.5
        assert table.loc[table["metric"] == "MISE", "value"].ge(0).all()

    def test_dp_variant_is_not_worse_on_mixture_errors(self):
        data, _ = generate_dataset(SimConfig(n=150, m=4, error_id="mixture3", seed=8), np.random.default_rng(8))
        chain = ChainConfig(iterations=2500, burn_in=1500, b_lik=50, seed=2)
        scores = {}
        for label in ("s-gp-dp", "s-gp-n"):
            outputs = run_chains(data, get_model_config(label, {"L": 10, "H": 6}), chain, progress=False)
            scores[label] = waic(np.concatenate([o.pointwise_loglik for o in outputs]))
        gap = scores["s-gp-n"].waic - scores["s-gp-dp"].waic
        paired = scores["s-gp-dp"].lppd - scores["s-gp-n"].lppd
        spread = 2.0 * np.sqrt(paired.size * paired.var())
        assert gap > -2.0 * spread, (scores["s-gp-dp"].waic, scores["s-gp-n"].waic)
