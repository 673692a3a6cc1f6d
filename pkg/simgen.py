"""Synthetic current-status data with a known truth, and the replicate harness.

Covariates: a continuous subject-level draw from U(-5, 5), a binary
subject-level draw and a jaw indicator, rescaled into the unit ball.
Teeth on both jaw sides share a CAR random effect; errors come from one of
two mixtures; the link is one of two monotone curves scaled to a fixed
signal-to-noise ratio.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm

import env
from config import ChainConfig, get_model_config
from gaussian_tools import sample_dirichlet
from mcmc_engine import ChainOutput, observed_states, run_chain
from model_core import CurrentStatusDataset, build_spatial_graph, rescale_covariates
from posthoc import LINK_GRID_POINTS, PredictiveModel, summarize_link

logger = logging.getLogger(__name__)

TRUE_BETA = np.array([-1.0, 1.0, -1.0]) / np.sqrt(3.0)
TRUE_INCREMENTS = (3.0, 4.0, 2.0)
EFFECT_SD = 0.1
EFFECT_RHO = 0.9
CENSORING_RATE = 0.2
CENSORING_SHAPE = {"g1": 1.0, "g2": 0.5}
CALIBRATION_DRAWS = 10**6
DEFAULT_SNR = 5.0
DESIGNS = {"sim1": "mixture3", "sim2": "gauss_t"}
METRICS = ("MSE", "RB", "CP", "MISE")


# ---------------------------------------------------------------------------
# True links and error laws
# ---------------------------------------------------------------------------

def _g1_base(x: np.ndarray) -> np.ndarray:
    y = 0.5 * (np.asarray(x, dtype=float) + 1.0)
    return norm.cdf((y - 0.5) / 0.2) - norm.cdf(-0.5 / 0.2)


def _g2_base(x: np.ndarray) -> np.ndarray:
    y = 0.5 * (np.asarray(x, dtype=float) + 1.0)
    return y**2 + y**3


LINKS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {"g1": _g1_base, "g2": _g2_base}


@dataclass(frozen=True)
class ErrorLaw:
    """Finite mixture of location-scale components.

    A component with ``df`` set is a Student t with that many degrees of
    freedom, otherwise it is Gaussian.
    """

    name: str
    weights: tuple[float, ...]
    means: tuple[float, ...]
    scales: tuple[float, ...]
    dfs: tuple[float | None, ...]

    def __post_init__(self):
        sizes = {len(self.weights), len(self.means), len(self.scales), len(self.dfs)}
        if len(sizes) != 1:
            raise ValueError(f"error law '{self.name}' has components of unequal length")
        if not np.isclose(sum(self.weights), 1.0):
            raise ValueError(f"error law '{self.name}' weights must sum to 1")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        component = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
        out = np.empty(component.shape)
        for h, (mu, scale, df) in enumerate(zip(self.means, self.scales, self.dfs)):
            mask = component == h
            count = int(mask.sum())
            noise = rng.standard_normal(count) if df is None else rng.standard_t(df, count)
            out[mask] = mu + scale * noise
        return out

    @property
    def variance(self) -> float:
        w = np.asarray(self.weights)
        mu = np.asarray(self.means)
        unit = np.array([1.0 if df is None else (df / (df - 2.0) if df > 2 else np.inf) for df in self.dfs])
        second = np.sum(w * (np.asarray(self.scales) ** 2 * unit + mu**2))
        return float(second - np.sum(w * mu) ** 2)

    def scaled(self, factor: float) -> "ErrorLaw":
        return replace(
            self,
            means=tuple(factor * v for v in self.means),
            scales=tuple(factor * v for v in self.scales),
        )


ERROR_LAWS: Dict[str, ErrorLaw] = {
    "mixture3": ErrorLaw("mixture3", (1 / 3, 1 / 3, 1 / 3), (-0.5, 0.0, 0.5), (0.1, 0.1, 0.1), (None, None, None)),
    "gauss_t": ErrorLaw("gauss_t", (0.9, 0.1), (0.0, 0.0), (0.1, 1.0), (None, 3.0)),
}


# ---------------------------------------------------------------------------
# Configuration and truth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    n: int
    m: int = 10
    p: int = 3
    K: int = 3
    link_id: str = "g1"
    error_id: str = "mixture3"
    seed: int = 0
    replicates: int = 1
    snr: float = DEFAULT_SNR

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.m < 4 or self.m % 2:
            raise ValueError(f"m must be an even integer >= 4, got {self.m}")
        if self.p != TRUE_BETA.size:
            raise ValueError(f"the generator has {TRUE_BETA.size} covariates, got p={self.p}")
        if self.K != len(TRUE_INCREMENTS):
            raise ValueError(f"the generator has K={len(TRUE_INCREMENTS)} states beyond 0, got K={self.K}")
        if self.link_id not in LINKS:
            raise ValueError(f"Unknown link '{self.link_id}'. Available: {', '.join(LINKS)}")
        if self.error_id not in ERROR_LAWS:
            raise ValueError(f"Unknown error law '{self.error_id}'. Available: {', '.join(ERROR_LAWS)}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if not self.snr > 0:
            raise ValueError(f"snr must be > 0, got {self.snr}")


@dataclass(frozen=True)
class SimTruth:
    """Everything the generator drew, kept for scoring fits."""

    beta: np.ndarray
    link_constant: float
    link_grid: np.ndarray
    link_values: np.ndarray
    sigma_b: np.ndarray
    b: np.ndarray
    log_t: np.ndarray
    r: np.ndarray
    c: np.ndarray
    s: np.ndarray


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def sample_covariates(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Raw ``(n, m, 3)`` covariates: U(-5, 5), Bernoulli(0.5), jaw indicator."""
    continuous = rng.uniform(-5.0, 5.0, size=n)
    binary = rng.binomial(1, 0.5, size=n).astype(float)
    jaw = (np.arange(1, m + 1) > m / 2).astype(float)
    x = np.empty((n, m, 3))
    x[..., 0] = continuous[:, None]
    x[..., 1] = binary[:, None]
    x[..., 2] = jaw[None, :]
    return x


def calibrate_snr(
    link: str | Callable[[np.ndarray], np.ndarray],
    beta0: np.ndarray,
    error_law: ErrorLaw,
    rng: np.random.Generator,
    draws: int = CALIBRATION_DRAWS,
    snr: float = DEFAULT_SNR,
    m: int = 10,
) -> float:
    """Scale ``c`` with ``Var(c g(x'beta0)) / Var(eps) = snr``.

    The signal variance is a Monte Carlo estimate over covariates drawn from
    the generating law and rescaled by their own largest norm; the error
    variance is the law's exact variance.
    """
    base = LINKS[link] if isinstance(link, str) else link
    subjects = -(-draws // m)
    x, _ = rescale_covariates(sample_covariates(subjects, m, rng).reshape(-1, 3)[:draws])
    signal = np.var(base(x @ np.asarray(beta0, dtype=float)))
    if not signal > 0:
        raise ValueError("zero signal variance")
    noise = error_law.variance
    if not np.isfinite(noise) or noise <= 0:
        raise ValueError(f"error law '{error_law.name}' has no finite positive variance")
    return float(np.sqrt(snr * noise / signal))


@functools.lru_cache(maxsize=None)
def link_constant(link_id: str, error_id: str, snr: float, m: int, seed: int) -> float:
    """Calibrated scale for a design, cached so replicates share one value."""
    rng = np.random.default_rng([seed, 0x5E])
    value = calibrate_snr(link_id, TRUE_BETA, ERROR_LAWS[error_id], rng, snr=snr, m=m)
    logger.info("Calibrated c=%.4f for link %s, errors %s (SNR %.1f)", value, link_id, error_id, snr)
    return value


def true_link(link_id: str, constant: float, points: int = LINK_GRID_POINTS) -> tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(-1.0, 1.0, points)
    return grid, constant * LINKS[link_id](grid)


def generate_dataset(cfg: SimConfig, rng: np.random.Generator) -> tuple[CurrentStatusDataset, SimTruth]:
    n, m, K = cfg.n, cfg.m, cfg.K
    x, _ = rescale_covariates(sample_covariates(n, m, rng))

    graph = build_spatial_graph(m)
    sigma_b = EFFECT_SD**2 * graph.car_scale(EFFECT_RHO)
    half = rng.standard_normal((n, graph.size)) @ np.linalg.cholesky(sigma_b).T
    b = half @ graph.Z.T

    constant = link_constant(cfg.link_id, cfg.error_id, cfg.snr, m, cfg.seed)
    eps = ERROR_LAWS[cfg.error_id].sample(rng, (n, m))
    log_t = constant * LINKS[cfg.link_id](x @ TRUE_BETA) + b + eps

    r = sample_dirichlet(np.array(TRUE_INCREMENTS), rng, size=n * m).reshape(n, m, K)
    c = rng.gamma(CENSORING_SHAPE[cfg.link_id], 1.0 / CENSORING_RATE, size=(n, m))
    s = observed_states(log_t, r, np.log(c))

    grid, values = true_link(cfg.link_id, constant)
    dataset = CurrentStatusDataset(x=x, c=c, s=s, K=K, covariate_names=("x1", "x2", "x3"))
    truth = SimTruth(
        beta=TRUE_BETA.copy(), link_constant=constant, link_grid=grid, link_values=values,
        sigma_b=sigma_b, b=b, log_t=log_t, r=r, c=c, s=s,
    )
    return dataset, truth


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitSummary:
    replicate: int
    n: int
    model: str
    beta_mean: np.ndarray
    beta_lo: np.ndarray
    beta_hi: np.ndarray
    link_mean: np.ndarray


def summarize_fit(
    outputs: Sequence[ChainOutput], model: PredictiveModel, replicate: int, n: int, name: str
) -> FitSummary:
    """Posterior mean and equal-tailed 95% interval of beta, and the mean link on the scoring grid."""
    beta = np.concatenate([out.beta for out in outputs])
    draws = [d for out in outputs for d in out.draws()]
    return FitSummary(
        replicate=replicate, n=n, model=name,
        beta_mean=beta.mean(axis=0),
        beta_lo=np.quantile(beta, 0.025, axis=0),
        beta_hi=np.quantile(beta, 0.975, axis=0),
        link_mean=summarize_link(draws, model, points=LINK_GRID_POINTS)["mean"].to_numpy(),
    )


def evaluate_metrics(fits: Sequence[FitSummary], truths: Mapping[int, SimTruth]) -> pd.DataFrame:
    """Long table with MSE, RB and CP per beta component and the link MISE, per fit."""
    rows: List[dict] = []
    for fit in fits:
        truth = truths[fit.replicate]
        if fit.link_mean.shape != truth.link_values.shape:
            raise ValueError(f"link grid of fit '{fit.model}' does not match the truth grid")
        base = {"replicate": fit.replicate, "n": fit.n, "model": fit.model}
        error = fit.beta_mean - truth.beta
        for k, b0 in enumerate(truth.beta):
            parameter = f"beta[{k + 1}]"
            covered = float(fit.beta_lo[k] <= b0 <= fit.beta_hi[k])
            rows.append({**base, "metric": "MSE", "parameter": parameter, "value": float(error[k] ** 2)})
            rows.append({**base, "metric": "RB", "parameter": parameter, "value": float(error[k] / b0)})
            rows.append({**base, "metric": "CP", "parameter": parameter, "value": covered})
        mise = float(np.mean((fit.link_mean - truth.link_values) ** 2))
        rows.append({**base, "metric": "MISE", "parameter": "g", "value": mise})
    return pd.DataFrame(rows, columns=["replicate", "n", "model", "metric", "parameter", "value"])


# ---------------------------------------------------------------------------
# Replicate harness
# ---------------------------------------------------------------------------

def _run_replicate(
    cfg: SimConfig, replicate: int, variants: Sequence[str], chain_config: ChainConfig, overrides: Mapping | None
) -> tuple[List[FitSummary], SimTruth]:
    rng = np.random.default_rng([cfg.seed, replicate])
    data, truth = generate_dataset(cfg, rng)
    counts = np.bincount(data.s.reshape(-1), minlength=cfg.K + 1) / data.s.size
    logger.debug("Replicate %d state frequencies %s", replicate, np.round(counts, 3))
    fits = []
    for name in variants:
        model_config = get_model_config(name, overrides)
        seed = int(rng.integers(2**31 - 1))
        outputs = [
            run_chain(data, model_config, replace(chain_config, seed=seed + i), progress=False)
            for i in range(chain_config.chain_count)
        ]
        model = PredictiveModel.from_settings(model_config.link_kind, model_config.L, model_config.effect_kind, cfg.m)
        fits.append(summarize_fit(outputs, model, replicate, cfg.n, name))
    logger.info("Replicate %d done (%s)", replicate, ", ".join(variants))
    return fits, truth


def run_replicates(
    cfg: SimConfig,
    variants: Sequence[str],
    chain_config: ChainConfig,
    overrides: Mapping | None = None,
) -> pd.DataFrame:
    """Generate, fit every variant and score each replicate; replicates run on worker threads."""
    # Calibrate once up front so worker threads hit the cache.
    link_constant(cfg.link_id, cfg.error_id, cfg.snr, cfg.m, cfg.seed)
    workers = min(cfg.replicates, env.thread_cap())
    logger.info(
        "Simulating %d replicate(s) at n=%d (%s, %s) on %d worker(s)",
        cfg.replicates, cfg.n, cfg.link_id, cfg.error_id, workers,
    )
    results = Parallel(n_jobs=workers, prefer="threads")(
        delayed(_run_replicate)(cfg, rep, variants, chain_config, overrides) for rep in range(cfg.replicates)
    )
    fits = [fit for rep_fits, _ in results for fit in rep_fits]
    truths = {rep: truth for rep, (_, truth) in enumerate(results)}
    return evaluate_metrics(fits, truths)
