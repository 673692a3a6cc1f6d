"""Monotone link functions of the single index.

The link is a linear combination of basis functions chosen so that
nonnegative coefficients give a nondecreasing curve with ``g(-1) = 0``:

* ``monotone_gp``: integrated hat functions on an equi-spaced knot grid,
  coefficients are derivative values at the knots;
* ``bernstein``: Bernstein polynomials with ordered coefficients, the
  coefficients being the increments;
* ``identity``: ``g(x) = omega * (x + 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import binom

SUPPORT_TOLERANCE = 1e-9


class LinkSupportError(ValueError):
    """A single index fell outside [-1, 1]."""


@dataclass(frozen=True)
class KnotGrid:
    L: int

    def __post_init__(self):
        if self.L < 2:
            raise ValueError(f"L must be >= 2, got {self.L}")

    @property
    def delta(self) -> float:
        return 2.0 / self.L

    @property
    def knots(self) -> np.ndarray:
        return self.delta * (np.arange(self.L + 1) - self.L / 2.0)

    @property
    def max_separation(self) -> float:
        return 2.0


@dataclass(frozen=True)
class LinkCoefficients:
    kind: str
    xi: np.ndarray

    def clipped(self) -> "LinkCoefficients":
        """Coefficients with negative entries set to 0 (for reporting)."""
        return LinkCoefficients(self.kind, np.maximum(np.asarray(self.xi, dtype=float), 0.0))


def _check_support(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(np.abs(x) > 1.0 + SUPPORT_TOLERANCE):
        raise LinkSupportError("index out of link support")
    return np.clip(x, -1.0, 1.0)


def _check_index(grid: KnotGrid, l: int) -> None:
    if not 0 <= l <= grid.L:
        raise IndexError(f"knot index {l} outside 0..{grid.L}")


def _hat(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


def _hat_cdf(t: np.ndarray) -> np.ndarray:
    """Integral of the unit hat from -inf to t."""
    t = np.clip(t, -1.0, 1.0)
    return np.where(t <= 0.0, 0.5 * (1.0 + t) ** 2, 1.0 - 0.5 * (1.0 - t) ** 2)


def eval_hat_basis(grid: KnotGrid, l: int, x: float) -> float:
    _check_index(grid, l)
    x = _check_support(x)
    return float(_hat((x - grid.knots[l]) / grid.delta))


def eval_integrated_basis(grid: KnotGrid, l: int, x: float) -> float:
    _check_index(grid, l)
    return float(integrated_basis_matrix(grid, np.atleast_1d(x))[0, l])


def integrated_basis_matrix(grid: KnotGrid, x: np.ndarray) -> np.ndarray:
    """``psi_l(x)`` for every point (rows) and knot (columns)."""
    x = _check_support(x).reshape(-1)
    t = (x[:, None] - grid.knots[None, :]) / grid.delta
    start = (-1.0 - grid.knots) / grid.delta
    return grid.delta * (_hat_cdf(t) - _hat_cdf(start)[None, :])


def bernstein_basis_matrix(grid: KnotGrid, x: np.ndarray) -> np.ndarray:
    """Basis for ordered Bernstein coefficients in increment form.

    Column ``l >= 1`` is ``P(Bin(L, (x+1)/2) >= l)``; column 0 is identically
    zero because the first coefficient is removed by the ``g(-1) = 0``
    centring.
    """
    x = _check_support(x).reshape(-1)
    y = 0.5 * (x + 1.0)
    levels = np.arange(grid.L + 1)
    out = binom.sf(levels[None, :] - 1, grid.L, y[:, None])
    out[:, 0] = 0.0
    return out


def identity_basis_matrix(x: np.ndarray) -> np.ndarray:
    x = _check_support(x).reshape(-1)
    return (x + 1.0)[:, None]


def basis_matrix(kind: str, grid: KnotGrid, x: np.ndarray) -> np.ndarray:
    """Design matrix mapping link coefficients to ``g`` at the points *x*."""
    if kind == "monotone_gp":
        return integrated_basis_matrix(grid, x)
    if kind == "bernstein":
        return bernstein_basis_matrix(grid, x)
    if kind == "identity":
        return identity_basis_matrix(x)
    raise ValueError(f"Unknown link kind '{kind}'")


def coefficient_count(kind: str, grid: KnotGrid) -> int:
    return 1 if kind == "identity" else grid.L + 1


def eval_link(coef: LinkCoefficients, grid: KnotGrid, x) -> np.ndarray | float:
    scalar = np.ndim(x) == 0
    values = basis_matrix(coef.kind, grid, np.atleast_1d(x)) @ np.asarray(coef.xi, dtype=float)
    return float(values[0]) if scalar else values


def covariate_effect(coef: LinkCoefficients, grid: KnotGrid, beta: np.ndarray, l: int) -> float:
    """Multiplicative effect ``exp(g(beta_l) - g(0))`` of covariate *l*."""
    b = float(np.asarray(beta)[l])
    if abs(b) > 1.0 + SUPPORT_TOLERANCE:
        raise LinkSupportError(f"|beta_{l}| = {abs(b)} exceeds 1")
    if b == 0.0:
        return 1.0
    values = eval_link(coef, grid, np.array([b, 0.0]))
    return float(np.exp(values[0] - values[1]))
