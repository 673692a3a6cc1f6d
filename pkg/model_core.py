"""Data model shared by every other module.

Holds the current-status dataset, the covariate scaling that is persisted
with a fit, the path-graph construction behind the spatial random effects,
and dataset validation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Relative slack on the unit-ball check; rescaling divides by a float max norm.
NORM_TOLERANCE = 1e-12


class DatasetError(ValueError):
    """Input data cannot be used for fitting or prediction."""


def _frozen(array: np.ndarray, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CurrentStatusDataset:
    """Covariates, inspection times and observed states per subject-tooth pair.

    Arrays are indexed ``[i, j]`` (subject, tooth) and are read-only after
    construction.
    """

    x: np.ndarray
    c: np.ndarray
    s: np.ndarray
    K: int
    covariate_names: tuple[str, ...] = ()
    subject_ids: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 3:
            raise DatasetError(f"x must have shape (n, m, p), got {x.shape}")
        n, m, p = x.shape
        c = np.asarray(self.c, dtype=float)
        s = np.asarray(self.s)
        if c.shape != (n, m) or s.shape != (n, m):
            raise DatasetError(f"c and s must have shape {(n, m)}, got {c.shape} and {s.shape}")
        if self.K < 1:
            raise DatasetError(f"K must be >= 1, got {self.K}")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "c", _frozen(c))
        object.__setattr__(self, "s", _frozen(s, dtype=np.int64))
        names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(p))
        if len(names) != p:
            raise DatasetError(f"{len(names)} covariate names given for p={p}")
        object.__setattr__(self, "covariate_names", names)
        ids = tuple(self.subject_ids) or tuple(str(i + 1) for i in range(n))
        if len(ids) != n:
            raise DatasetError(f"{len(ids)} subject ids given for n={n}")
        object.__setattr__(self, "subject_ids", ids)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def m(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[2]


@dataclass(frozen=True)
class CovariateScaling:
    """Standardization constants and the global rescale factor of a fit.

    ``means``/``sds`` apply to the columns listed in ``continuous``; every
    column is then divided by ``factor``.
    """

    names: tuple[str, ...]
    continuous: tuple[str, ...]
    means: tuple[float, ...]
    sds: tuple[float, ...]
    factor: float

    def apply(self, raw: Sequence[float] | np.ndarray) -> np.ndarray:
        """Map raw covariates (last axis in ``names`` order) onto the fitted scale."""
        out = np.array(raw, dtype=float, copy=True)
        if out.shape[-1] != len(self.names):
            raise DatasetError(f"expected {len(self.names)} covariates, got {out.shape[-1]}")
        for name, mu, sd in zip(self.continuous, self.means, self.sds):
            k = self.names.index(name)
            out[..., k] = (out[..., k] - mu) / sd
        return out / self.factor

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "continuous": list(self.continuous),
            "means": list(self.means),
            "sds": list(self.sds),
            "factor": self.factor,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CovariateScaling":
        return cls(
            names=tuple(payload["names"]),
            continuous=tuple(payload.get("continuous", ())),
            means=tuple(float(v) for v in payload.get("means", ())),
            sds=tuple(float(v) for v in payload.get("sds", ())),
            factor=float(payload["factor"]),
        )


def rescale_covariates(raw: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide every covariate vector by the largest vector norm in the data."""
    raw = np.asarray(raw, dtype=float)
    norms = np.linalg.norm(raw, axis=-1)
    factor = float(norms.max()) if norms.size else 0.0
    if not factor > 0:
        raise DatasetError("degenerate covariates")
    return raw / factor, factor


def standardize_columns(raw: np.ndarray, columns: Sequence[int]) -> tuple[np.ndarray, list[float], list[float]]:
    """Center and scale the selected last-axis columns to mean 0, variance 1."""
    out = np.array(raw, dtype=float, copy=True)
    means: list[float] = []
    sds: list[float] = []
    for k in columns:
        values = out[..., k]
        mu = float(values.mean())
        sd = float(values.std())
        if not sd > 0:
            raise DatasetError(f"covariate column {k} is constant and cannot be standardized")
        out[..., k] = (values - mu) / sd
        means.append(mu)
        sds.append(sd)
    return out, means, sds


# ---------------------------------------------------------------------------
# Spatial graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialGraph:
    """Path graph over the m/2 tooth positions of one jaw side.

    ``Z`` stacks the identity over the anti-diagonal so teeth ``j`` and
    ``m-j+1`` share one effect.
    """

    W: np.ndarray
    E_W: np.ndarray
    Z: np.ndarray

    @property
    def size(self) -> int:
        return self.W.shape[0]

    def car_scale(self, rho: float) -> np.ndarray:
        """Centre ``(E_W - rho W)^{-1}`` of the inverse-Wishart prior."""
        if not 0.0 < rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {rho}")
        precision = self.E_W - rho * self.W
        scale = np.linalg.inv(precision)
        return 0.5 * (scale + scale.T)


def build_spatial_graph(m: int) -> SpatialGraph:
    if m % 2 != 0 or m < 2:
        raise DatasetError(f"tooth count m must be a positive even integer, got {m}")
    if m == 2:
        raise DatasetError("graph too small for CAR scale")
    half = m // 2
    W = np.zeros((half, half))
    idx = np.arange(half - 1)
    W[idx, idx + 1] = 1.0
    W[idx + 1, idx] = 1.0
    E_W = np.diag(W.sum(axis=1))
    eye = np.eye(half)
    Z = np.vstack([eye, eye[::-1]])
    return SpatialGraph(W=_frozen(W), E_W=_frozen(E_W), Z=_frozen(Z))


def subject_level_design(m: int) -> np.ndarray:
    """One shared effect per subject: every tooth loads on a single column."""
    return _frozen(np.ones((m, 1)))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_dataset(ds: CurrentStatusDataset) -> List[str]:
    """Return one message per violated invariant; empty means valid."""
    violations: List[str] = []
    if ds.m % 2 != 0:
        violations.append(f"m={ds.m}: tooth count must be even")

    norms = np.linalg.norm(ds.x, axis=-1)
    for i, j in zip(*np.nonzero(~(norms <= 1.0 + NORM_TOLERANCE))):
        violations.append(f"({i}, {j}) covariates: norm {norms[i, j]:.6g} exceeds 1")

    for i, j in zip(*np.nonzero(~(np.isfinite(ds.c) & (ds.c > 0)))):
        violations.append(f"({i}, {j}) inspection time: {ds.c[i, j]!r} must be > 0")

    for i, j in zip(*np.nonzero((ds.s < 0) | (ds.s > ds.K))):
        violations.append(f"({i}, {j}) state range: {ds.s[i, j]} not in 0..{ds.K}")

    if violations:
        logger.debug("Dataset has %d violation(s)", len(violations))
    return violations
