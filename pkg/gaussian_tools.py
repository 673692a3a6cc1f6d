"""Gaussian building blocks for the sampler.

Matérn correlations, the Toeplitz prior covariance of the link coefficients,
FFT circulant-embedding draws from that prior, elliptical slice sampling and
the truncated univariate samplers used by the latent-variable updates.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_toeplitz, toeplitz
from scipy.optimize import bisect
from scipy.special import betainc, betaincinv, gamma, kv, log_ndtr, ndtri_exp

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
MIN_INTERVAL_MASS = 1e-300


class SamplerError(RuntimeError):
    """A numerical sampling step could not be carried out."""


# ---------------------------------------------------------------------------
# Matérn kernel and Toeplitz covariance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaternKernel:
    nu: float = 0.75
    lengthscale: float = 1.0

    def __post_init__(self):
        if not (self.nu > 0 and self.lengthscale > 0):
            raise ValueError(f"Matérn parameters must be positive, got nu={self.nu}, lengthscale={self.lengthscale}")

    def __call__(self, r) -> np.ndarray | float:
        return matern(self, r)


def matern(kernel: MaternKernel, r) -> np.ndarray | float:
    """Matérn correlation ``2^{1-nu}/Gamma(nu) z^nu K_nu(z)``, ``z = sqrt(2 nu) r / l``."""
    r_arr = np.abs(np.asarray(r, dtype=float))
    z = np.sqrt(2.0 * kernel.nu) * r_arr / kernel.lengthscale
    with np.errstate(invalid="ignore", over="ignore"):
        if kernel.nu == 0.5:
            values = np.exp(-z)
        else:
            values = (2.0 ** (1.0 - kernel.nu) / gamma(kernel.nu)) * z**kernel.nu * kv(kernel.nu, z)
    # K_nu underflows to 0 far out and z^nu * K_nu -> 0 * inf at the origin.
    values = np.where(z == 0.0, 1.0, values)
    values = np.where(np.isfinite(values), values, 0.0)
    return float(values) if np.ndim(r) == 0 else values


def default_lengthscale(max_separation: float, nu: float = 0.75, target: float = 0.05) -> float:
    """Length-scale whose correlation at *max_separation* equals *target*."""
    if not max_separation > 0:
        raise ValueError(f"max_separation must be > 0, got {max_separation}")

    def gap(lengthscale: float) -> float:
        return matern(MaternKernel(nu, lengthscale), max_separation) - target

    lo, hi = 1e-3 * max_separation, max_separation
    while gap(hi) < 0:
        hi *= 2.0
    while gap(lo) > 0:
        lo /= 2.0
    return float(bisect(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


@dataclass(frozen=True)
class ToeplitzCovariance:
    """Symmetric Toeplitz matrix defined by its first row."""

    first_row: np.ndarray

    @classmethod
    def from_kernel(cls, kernel: MaternKernel, size: int, spacing: float) -> "ToeplitzCovariance":
        return cls(np.asarray(kernel(spacing * np.arange(size)), dtype=float))

    @property
    def matrix(self) -> np.ndarray:
        return toeplitz(self.first_row)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``K^{-1} rhs`` by Levinson recursion."""
        try:
            out = solve_toeplitz(self.first_row, rhs)
        except np.linalg.LinAlgError as exc:
            raise SamplerError(f"Toeplitz solve failed: {exc}") from exc
        if not np.all(np.isfinite(out)):
            raise SamplerError("Toeplitz solve produced non-finite values")
        return out

    def quad_form(self, v: np.ndarray) -> float:
        return float(v @ self.solve(v))


# ---------------------------------------------------------------------------
# Circulant embedding
# ---------------------------------------------------------------------------

@dataclass
class CirculantEmbedding:
    """FFT sampler for a stationary Gaussian vector on an equi-spaced grid.

    When the minimal embedding is not nonnegative definite and *lag_fn*
    (correlation as a function of integer lag) is available, the embedding
    is doubled up to *max_factor* times its minimal size. Remaining negative
    eigenvalues below ``clamp_tol * max`` are set to zero.
    """

    first_row: np.ndarray
    lag_fn: Callable[[np.ndarray], np.ndarray] | None = None
    max_factor: int = 8
    clamp_tol: float = 1e-10
    sqrt_eig: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        row = np.asarray(self.first_row, dtype=float)
        if row.ndim != 1 or row.size < 2:
            raise ValueError("first_row must be a vector with at least 2 entries")
        self.first_row = row
        factor = 1
        while True:
            half = (row.size - 1) * factor
            lags = row if factor == 1 else np.asarray(self.lag_fn(np.arange(half + 1)), dtype=float)
            circ = np.concatenate([lags, lags[-2:0:-1]])
            eig = np.fft.fft(circ).real
            if eig.min() >= 0 or self.lag_fn is None or factor >= self.max_factor:
                break
            factor *= 2
            logger.debug("Circulant embedding padded to %d points", 2 * (row.size - 1) * factor)
        worst = eig.min()
        if worst < 0:
            if -worst > self.clamp_tol * eig.max():
                raise SamplerError("embedding not nonnegative definite")
            eig = np.clip(eig, 0.0, None)
        self.sqrt_eig = np.sqrt(eig / circ.size)

    @property
    def embedding_size(self) -> int:
        return self.sqrt_eig.size

    def sample(self, tau2: float, rng: np.random.Generator) -> np.ndarray:
        n = self.first_row.size
        if tau2 == 0:
            return np.zeros(n)
        size = self.embedding_size
        noise = rng.standard_normal(size) + 1j * rng.standard_normal(size)
        field_ = np.fft.fft(self.sqrt_eig * noise)
        return np.sqrt(tau2) * field_.real[:n]


def sample_stationary_gp(
    first_row: np.ndarray | CirculantEmbedding,
    tau2: float,
    rng: np.random.Generator,
    lag_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """One draw from ``N(0, tau2 * toeplitz(first_row))``.

    Pass a prebuilt :class:`CirculantEmbedding` to reuse its eigenvalues
    across draws.
    """
    embedding = first_row if isinstance(first_row, CirculantEmbedding) else CirculantEmbedding(first_row, lag_fn=lag_fn)
    return embedding.sample(tau2, rng)


# ---------------------------------------------------------------------------
# Elliptical slice sampling
# ---------------------------------------------------------------------------

def ess_step(
    current: np.ndarray,
    prior_draw: Callable[[np.random.Generator], np.ndarray],
    loglik: Callable[[np.ndarray], float],
    rng: np.random.Generator,
    current_loglik: float | None = None,
    max_shrink: int = 1000,
) -> tuple[np.ndarray, float]:
    """One elliptical slice move for a zero-mean Gaussian prior.

    Returns the new state together with its log-likelihood so callers can
    chain steps without re-evaluating it. A log-likelihood of ``-inf`` marks
    a hard constraint and is rejected like any value below the threshold.
    """

    current = np.asarray(current, dtype=float)
    cur_ll = loglik(current) if current_loglik is None else current_loglik
    if not np.isfinite(cur_ll):
        raise SamplerError(f"log-likelihood of the current state is not finite ({cur_ll})")

    nu = prior_draw(rng)
    threshold = cur_ll + np.log(rng.random())
    theta = rng.uniform(0.0, TWO_PI)
    lo, hi = theta - TWO_PI, theta
    for _ in range(max_shrink):
        proposal = current * np.cos(theta) + nu * np.sin(theta)
        ll = loglik(proposal)
        if np.isnan(ll) or ll == np.inf:
            raise SamplerError(f"non-finite log-likelihood ({ll})")
        if ll > threshold:
            return proposal, float(ll)
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = rng.uniform(lo, hi)
    raise SamplerError("ESS bracket collapse")


# ---------------------------------------------------------------------------
# Truncated univariate samplers
# ---------------------------------------------------------------------------

def _scalar_or_array(values: np.ndarray, *inputs) -> np.ndarray | float:
    return float(values) if all(np.ndim(v) == 0 for v in inputs) else values


def log_normal_interval_mass(a, b) -> np.ndarray:
    """``log(Phi(b) - Phi(a))`` evaluated on the lower tail for accuracy."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    flip = a + b > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    log_hi = log_ndtr(hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        return log_hi + np.log1p(-np.exp(log_ndtr(lo) - log_hi))


def sample_trunc_normal(mean, sd, lo, hi, rng: np.random.Generator) -> np.ndarray | float:
    """``N(mean, sd^2)`` restricted to ``(lo, hi]`` by inverse CDF.

    Intervals with ``lo + hi`` above the mean are reflected so the inverse
    CDF always runs on the lower tail, where ``log Phi`` keeps full
    precision. Inputs broadcast.
    """

    mean_a, sd_a, lo_a, hi_a = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, sd, lo, hi)))
    if np.any(~(sd_a > 0)):
        raise ValueError("sd must be > 0")
    a = (lo_a - mean_a) / sd_a
    b = (hi_a - mean_a) / sd_a
    flip = a + b > 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    log_pb = log_ndtr(b2)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.exp(log_ndtr(a2) - log_pb)
        log_mass = log_pb + np.log1p(-ratio)
    if np.any(~(hi_a > lo_a)) or np.any(~np.isfinite(log_mass)):
        raise SamplerError("empty truncation region")
    u = 1.0 - rng.random(mean_a.shape)
    z = ndtri_exp(log_pb + np.log(ratio + u * (1.0 - ratio)))
    z = np.where(flip, -z, z)
    draw = np.clip(mean_a + sd_a * z, lo_a, hi_a)
    return _scalar_or_array(draw, mean, sd, lo, hi)


def sample_trunc_beta(a, b, lo, hi, rng: np.random.Generator) -> np.ndarray | float:
    """``Beta(a, b)`` restricted to ``(lo, hi)`` by inverse CDF.

    Intervals sitting in the upper tail are mapped through ``x -> 1 - x``
    so the regularized incomplete beta is evaluated away from 1.
    """

    a_a, b_a, lo_a, hi_a = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, lo, hi)))
    if np.any(~(a_a > 0)) or np.any(~(b_a > 0)):
        raise ValueError("Beta shape parameters must be > 0")
    flip = betainc(a_a, b_a, lo_a) > 0.5
    a2 = np.where(flip, b_a, a_a)
    b2 = np.where(flip, a_a, b_a)
    lo2 = np.where(flip, 1.0 - hi_a, lo_a)
    hi2 = np.where(flip, 1.0 - lo_a, hi_a)
    q_lo = betainc(a2, b2, lo2)
    mass = betainc(a2, b2, hi2) - q_lo
    if np.any(~(hi_a > lo_a)) or np.any(~(mass > MIN_INTERVAL_MASS)):
        raise SamplerError("empty truncation region")
    u = 1.0 - rng.random(a_a.shape)
    x = betaincinv(a2, b2, q_lo + u * mass)
    x = np.where(flip, 1.0 - x, x)
    draw = np.clip(x, lo_a, hi_a)
    return _scalar_or_array(draw, a, b, lo, hi)


def sample_dirichlet(alpha, rng: np.random.Generator, size: int | None = None, floor: float = 1e-14) -> np.ndarray:
    """Dirichlet rows with entries floored at *floor* and renormalized.

    *alpha* is a ``(K,)`` vector or an ``(N, K)`` array of row parameters.
    Gamma variates are drawn on the log scale (``G_{a+1} U^{1/a}``) so
    small shapes do not underflow.
    """

    alpha = np.asarray(alpha, dtype=float)
    if np.any(~(alpha > 0)):
        raise ValueError("Dirichlet parameters must be > 0")
    shape = alpha.shape if size is None else (size,) + alpha.shape
    if 0 in shape:
        return np.empty(shape)
    alpha_b = np.broadcast_to(alpha, shape)
    log_g = np.log(rng.standard_gamma(alpha_b + 1.0)) + np.log(1.0 - rng.random(shape)) / alpha_b
    log_g -= log_g.max(axis=-1, keepdims=True)
    weights = np.exp(log_g)
    out = np.maximum(weights / weights.sum(axis=-1, keepdims=True), floor)
    return out / out.sum(axis=-1, keepdims=True)


def sample_inverse_gamma(shape, scale, rng: np.random.Generator) -> np.ndarray | float:
    """Inverse-gamma draw with density proportional to ``x^{-shape-1} e^{-scale/x}``."""
    draw = np.asarray(scale, dtype=float) / rng.standard_gamma(shape)
    return float(draw) if np.ndim(draw) == 0 else draw
