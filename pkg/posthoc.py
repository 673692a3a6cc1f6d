"""Summaries computed from kept draws.

State occupation and transition probabilities by Monte Carlo, WAIC,
model residuals, link curves, covariate-effect multipliers and the knot
count selection rule.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from tqdm import tqdm

from conditionals import SamplerContext, partial_sums, residuals  # noqa: F401
from gaussian_tools import sample_dirichlet
from mcmc_engine import PosteriorDraw
from model_core import build_spatial_graph, subject_level_design
from monotone_link import KnotGrid, LinkCoefficients, basis_matrix, covariate_effect

logger = logging.getLogger(__name__)

LINK_GRID_POINTS = 100


@dataclass(frozen=True)
class PredictiveModel:
    """What a prediction needs beyond the draws: link basis and effect design."""

    link_kind: str
    grid: KnotGrid
    Z: np.ndarray

    @classmethod
    def from_context(cls, ctx: SamplerContext) -> "PredictiveModel":
        return cls(ctx.config.link_kind, ctx.grid, ctx.Z)

    @classmethod
    def from_settings(cls, link_kind: str, L: int, effect_kind: str, m: int) -> "PredictiveModel":
        Z = build_spatial_graph(m).Z if effect_kind == "spatial" else subject_level_design(m)
        return cls(link_kind, KnotGrid(L), Z)

    def link(self, draw: PosteriorDraw, index: np.ndarray) -> np.ndarray:
        return basis_matrix(self.link_kind, self.grid, np.atleast_1d(index)) @ draw.xi


# ---------------------------------------------------------------------------
# Predictive sampling and probability curves
# ---------------------------------------------------------------------------

def sample_predictive(
    draw: PosteriorDraw,
    model: PredictiveModel,
    x: np.ndarray,
    j: int,
    B: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """*B* pairs ``(T, R)`` for covariates *x* at tooth position *j* (0-based)."""
    g = float(model.link(draw, np.asarray(x) @ draw.beta)[0])
    effect_var = float(model.Z[j] @ draw.sigma_b @ model.Z[j])
    r = sample_dirichlet(draw.alpha, rng, size=B)
    h = rng.choice(draw.pi.size, size=B, p=draw.pi / draw.pi.sum())
    y = g + draw.phi[h] + np.sqrt(effect_var + draw.s2[h]) * rng.standard_normal(B)
    return np.exp(y), r


def state_paths(t_total: np.ndarray, r: np.ndarray, times: np.ndarray) -> np.ndarray:
    """State occupied at each time: count of thresholds ``T V^(k) <= t``."""
    thresholds = t_total[:, None] * partial_sums(r)[:, 1:]
    return np.sum(thresholds[:, None, :] <= np.asarray(times)[None, :, None], axis=-1)


@dataclass(frozen=True)
class ProbabilityCurves:
    """Per-draw probability curves with posterior summaries.

    ``per_draw`` has shape ``(draws, times, labels)``; missing values are NaN.
    """

    kind: str
    labels: tuple[str, ...]
    times: np.ndarray
    per_draw: np.ndarray
    baseline: float | None = None

    def mean(self) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return np.nanmean(self.per_draw, axis=0) if self.per_draw.size else self.per_draw

    def n_effective(self) -> np.ndarray:
        return np.sum(~np.isnan(self.per_draw), axis=0)

    def bands(self, level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
        """Equal-tailed bands over draws, widened if needed to contain the mean."""
        tail = 0.5 * (1.0 - level)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lo = np.nanquantile(self.per_draw, tail, axis=0)
            hi = np.nanquantile(self.per_draw, 1.0 - tail, axis=0)
        mean = self.mean()
        return np.clip(np.fmin(lo, mean), 0.0, 1.0), np.clip(np.fmax(hi, mean), 0.0, 1.0)

    def to_frame(self) -> pd.DataFrame:
        mean = self.mean()
        lo, hi = self.bands()
        n_eff = self.n_effective()
        rows = []
        for a, t in enumerate(self.times):
            for b, label in enumerate(self.labels):
                rows.append(
                    {
                        "kind": self.kind,
                        "state_or_transition": label,
                        "t": float(t),
                        "mean": mean[a, b],
                        "lo95": lo[a, b],
                        "hi95": hi[a, b],
                        "n_effective": int(n_eff[a, b]),
                    }
                )
        return pd.DataFrame(rows)


def _check_times(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(times < 0) or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be nonnegative and strictly increasing")
    return times


def estimate_sop(
    draws: Sequence[PosteriorDraw],
    model: PredictiveModel,
    x: np.ndarray,
    j: int,
    times,
    B: int,
    rng: np.random.Generator,
    progress: bool = False,
) -> ProbabilityCurves:
    times = _check_times(times)
    K = draws[0].alpha.size
    out = np.empty((len(draws), times.size, K + 1))
    for d, draw in enumerate(tqdm(draws, desc="SOP", disable=not progress, leave=False)):
        t_total, r = sample_predictive(draw, model, x, j, B, rng)
        states = state_paths(t_total, r, times)
        for k in range(K + 1):
            out[d, :, k] = np.count_nonzero(states == k, axis=0) / B
    return ProbabilityCurves("SOP", tuple(str(k) for k in range(K + 1)), times, out)


def estimate_tp(
    draws: Sequence[PosteriorDraw],
    model: PredictiveModel,
    x: np.ndarray,
    j: int,
    u: float,
    times,
    B: int,
    rng: np.random.Generator,
    progress: bool = False,
) -> ProbabilityCurves:
    """``P(state s at u + t | state r at u)`` for ``r <= s`` on the offsets *times*."""
    if u < 0:
        raise ValueError(f"baseline time must be >= 0, got {u}")
    times = _check_times(times)
    K = draws[0].alpha.size
    pairs = [(r_, s_) for r_ in range(K + 1) for s_ in range(r_, K + 1)]
    out = np.full((len(draws), times.size, len(pairs)), np.nan)
    missing = 0
    for d, draw in enumerate(tqdm(draws, desc="TP", disable=not progress, leave=False)):
        t_total, r = sample_predictive(draw, model, x, j, B, rng)
        at_u = state_paths(t_total, r, np.array([u]))[:, 0]
        later = state_paths(t_total, r, u + times)
        for c, (r_, s_) in enumerate(pairs):
            occupied = at_u == r_
            denominator = np.count_nonzero(occupied)
            if denominator == 0:
                missing += times.size
                continue
            out[d, :, c] = np.count_nonzero(later[occupied] == s_, axis=0) / denominator
    if missing:
        logger.info("%d TP cell(s) have no draws in the conditioning state and are reported missing", missing)
    labels = tuple(f"{r_}-{s_}" for r_, s_ in pairs)
    return ProbabilityCurves("TP", labels, times, out, baseline=float(u))


# ---------------------------------------------------------------------------
# WAIC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WaicResult:
    waic: float
    p_waic: float
    lppd: np.ndarray
    se: float

    @property
    def elpd(self) -> float:
        return -0.5 * self.waic


def waic(pointwise_loglik: np.ndarray) -> WaicResult:
    """``-2 (lppd - p_waic)`` from a draws x points log-likelihood matrix."""
    ll = np.asarray(pointwise_loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ValueError("waic needs a (draws, points) matrix with at least 2 draws")
    bad = np.flatnonzero(~np.all(np.isfinite(ll), axis=0))
    if bad.size:
        raise ValueError(f"non-finite log-likelihood at point {int(bad[0])}")
    lppd = logsumexp(ll, axis=0) - np.log(ll.shape[0])
    penalty = ll.var(axis=0, ddof=1)
    pointwise = -2.0 * (lppd - penalty)
    return WaicResult(
        waic=float(pointwise.sum()),
        p_waic=float(penalty.sum()),
        lppd=lppd,
        se=float(np.sqrt(pointwise.size * pointwise.var())),
    )


# ---------------------------------------------------------------------------
# Residuals, link and effects
# ---------------------------------------------------------------------------

def summarize_link(
    draws: Sequence[PosteriorDraw], model: PredictiveModel, points: int = LINK_GRID_POINTS
) -> pd.DataFrame:
    """Posterior mean and 95% band of ``g`` on an equi-spaced grid, with ``xi`` clipped at 0."""
    x = np.linspace(-1.0, 1.0, points)
    basis = basis_matrix(model.link_kind, model.grid, x)
    curves = np.stack([basis @ np.maximum(d.xi, 0.0) for d in draws])
    return pd.DataFrame(
        {
            "x": x,
            "mean": curves.mean(axis=0),
            "lo95": np.quantile(curves, 0.025, axis=0),
            "hi95": np.quantile(curves, 0.975, axis=0),
        }
    )


def covariate_effects(
    draws: Sequence[PosteriorDraw], model: PredictiveModel, names: Sequence[str]
) -> pd.DataFrame:
    """Plug-in multipliers ``exp(g(beta_l) - g(0))`` at the posterior means, plus per-draw bands."""
    xi_hat = np.mean([np.maximum(d.xi, 0.0) for d in draws], axis=0)
    beta_hat = np.mean([d.beta for d in draws], axis=0)
    plug_in = LinkCoefficients(model.link_kind, xi_hat)
    rows = []
    for l, name in enumerate(names):
        per_draw = [
            covariate_effect(LinkCoefficients(model.link_kind, d.xi).clipped(), model.grid, d.beta, l) for d in draws
        ]
        rows.append(
            {
                "covariate": name,
                "multiplier": covariate_effect(plug_in, model.grid, beta_hat, l),
                "lo95": float(np.quantile(per_draw, 0.025)),
                "hi95": float(np.quantile(per_draw, 0.975)),
            }
        )
    return pd.DataFrame(rows)


def select_knot_count(table: Mapping[int, float], tie_window: float = 10.0) -> int:
    """Smallest L whose WAIC is within *tie_window* of the best one."""
    if not table:
        raise ValueError("knot table is empty")
    best = min(table.values())
    return min(L for L, value in table.items() if value - best < tie_window)
