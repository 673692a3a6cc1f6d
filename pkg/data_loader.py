"""Read current-status CSV files into a :class:`CurrentStatusDataset`."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np
import pandas as pd

from model_core import (
    CovariateScaling,
    CurrentStatusDataset,
    DatasetError,
    rescale_covariates,
    standardize_columns,
    validate_dataset,
)

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("subject_id", "tooth_id", "state", "inspection_time")


def _detect_continuous(frame: pd.DataFrame, names: Sequence[str]) -> List[str]:
    # Anything that is not a 0/1 indicator is standardized.
    out = []
    for name in names:
        values = set(np.unique(frame[name].to_numpy(dtype=float)))
        if not values <= {0.0, 1.0}:
            out.append(name)
    return out


def load_dataset_csv(
    path: str | Path,
    covariates: Sequence[str] | None = None,
    continuous: Sequence[str] | None = None,
    K: int | None = None,
) -> tuple[CurrentStatusDataset, CovariateScaling]:
    """Load one row per tooth, validate, standardize and rescale covariates.

    Parameters
    ----------
    path : str | Path
        CSV with a header row: subject_id, tooth_id, state, inspection_time,
        then covariate columns.
    covariates : Sequence[str] | None
        Covariate columns to use, in order. Defaults to every extra column.
    continuous : Sequence[str] | None
        Columns standardized to mean 0 / variance 1 before rescaling.
        Defaults to every covariate that is not a 0/1 indicator.
    K : int | None
        Absorbing state. Defaults to the largest observed state.
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Data file not found: {path}")
    frame = pd.read_csv(path, encoding="utf-8")

    missing = [col for col in REQUIRED_COLUMNS if col not in frame.columns]
    if covariates is not None:
        missing += [col for col in covariates if col not in frame.columns]
    if missing:
        raise DatasetError(f"missing column(s): {', '.join(missing)}")

    names = list(covariates) if covariates is not None else [c for c in frame.columns if c not in REQUIRED_COLUMNS]
    if not names:
        raise DatasetError("no covariate columns found")
    used = list(REQUIRED_COLUMNS) + names
    if frame[used].isna().any().any():
        bad = [col for col in used if frame[col].isna().any()]
        raise DatasetError(f"missing values in column(s): {', '.join(bad)}")

    frame = frame.sort_values(["subject_id", "tooth_id"], kind="stable")
    counts = frame.groupby("subject_id", sort=False).size()
    if counts.nunique() != 1:
        raise DatasetError("every subject must have the same number of teeth")
    m = int(counts.iloc[0])
    n = len(counts)
    if m % 2 != 0:
        raise DatasetError(f"teeth per subject must be even, got {m}")
    expected = np.arange(1, m + 1)
    for subject, teeth in frame.groupby("subject_id", sort=False)["tooth_id"]:
        if not np.array_equal(teeth.to_numpy(), expected):
            raise DatasetError(f"subject '{subject}' has tooth_id {sorted(teeth.tolist())}, expected 1..{m}")

    raw = frame[names].to_numpy(dtype=float).reshape(n, m, len(names))
    cont = list(continuous) if continuous is not None else _detect_continuous(frame, names)
    unknown = [c for c in cont if c not in names]
    if unknown:
        raise DatasetError(f"continuous column(s) not among covariates: {', '.join(unknown)}")
    standardized, means, sds = standardize_columns(raw, [names.index(c) for c in cont])
    x, factor = rescale_covariates(standardized)

    states = frame["state"].to_numpy()
    if not np.all(np.equal(np.mod(states, 1), 0)):
        raise DatasetError("state column must hold integers")
    states = states.astype(np.int64).reshape(n, m)
    c = frame["inspection_time"].to_numpy(dtype=float).reshape(n, m)

    dataset = CurrentStatusDataset(
        x=x,
        c=c,
        s=states,
        K=int(K if K is not None else states.max()),
        covariate_names=tuple(names),
        subject_ids=tuple(str(s) for s in counts.index),
    )
    violations = validate_dataset(dataset)
    if violations:
        preview = "; ".join(violations[:5])
        raise DatasetError(f"{len(violations)} dataset violation(s): {preview}")

    scaling = CovariateScaling(
        names=tuple(names),
        continuous=tuple(cont),
        means=tuple(means),
        sds=tuple(sds),
        factor=factor,
    )
    logger.info("Loaded %d subjects x %d teeth, p=%d, K=%d from %s", n, m, len(names), dataset.K, path)
    return dataset, scaling


def save_dataset_csv(dataset: CurrentStatusDataset, path: str | Path) -> Path:
    """Write a dataset in the input schema (covariates on the fitted scale)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, m, p = dataset.x.shape
    frame = pd.DataFrame(
        {
            "subject_id": np.repeat(np.arange(1, n + 1), m),
            "tooth_id": np.tile(np.arange(1, m + 1), n),
            "state": dataset.s.reshape(-1),
            "inspection_time": dataset.c.reshape(-1),
        }
    )
    for k, name in enumerate(dataset.covariate_names):
        frame[name] = dataset.x[..., k].reshape(-1)
    frame.to_csv(path, index=False)
    return path


def profile_vector(scaling: CovariateScaling, tokens: Iterable[str]) -> np.ndarray:
    """Build a fitted-scale covariate vector from ``name`` / ``name=value`` tokens.

    Bare names mean 1; covariates not mentioned are 0 on the raw scale.
    """

    raw = np.zeros(len(scaling.names))
    for token in tokens:
        token = token.strip()
        if not token:
            continue
        name, _, value = token.partition("=")
        name = name.strip()
        if name not in scaling.names:
            raise DatasetError(f"unknown covariate '{name}' in profile. Available: {', '.join(scaling.names)}")
        try:
            raw[scaling.names.index(name)] = float(value) if value else 1.0
        except ValueError as exc:
            raise DatasetError(f"invalid value in profile token '{token}'") from exc
    x = scaling.apply(raw)
    if np.linalg.norm(x) > 1.0 + 1e-12:
        raise DatasetError(f"profile lies outside the fitted covariate range (norm {np.linalg.norm(x):.3f} > 1)")
    return x
