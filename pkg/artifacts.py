"""Persist fitted runs and load them back for prediction and diagnostics.

A run directory holds ``draws.csv``, ``pointwise_loglik.bin``,
``residuals.csv``, ``meta.json`` and any requested summaries, plus
``manifest.json``, which is written last. A directory without a manifest
is not a run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Sequence

import numpy as np
import pandas as pd

from mcmc_engine import ChainOutput

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
LOGLIK_MAGIC = b"MSMA"
_LOGLIK_HEADER = struct.Struct("<4sIII")

DRAWS_FILE = "draws.csv"
LOGLIK_FILE = "pointwise_loglik.bin"
RESIDUALS_FILE = "residuals.csv"
META_FILE = "meta.json"
MANIFEST_FILE = "manifest.json"


# ---------------------------------------------------------------------------
# Individual files
# ---------------------------------------------------------------------------

def write_draws(outputs: Sequence[ChainOutput], path: Path) -> Path:
    """All chains in one table, with a leading ``chain`` column."""
    frames = []
    for index, out in enumerate(outputs):
        frame = out.to_frame()
        frame.insert(0, "chain", index)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    return path


def read_draws(path: Path) -> List[pd.DataFrame]:
    frame = pd.read_csv(path)
    if "chain" not in frame.columns:
        raise ValueError(f"{path} has no 'chain' column")
    return [group.drop(columns="chain").reset_index(drop=True) for _, group in frame.groupby("chain", sort=True)]


def write_loglik(matrix: np.ndarray, path: Path) -> Path:
    """Row-major little-endian doubles after a 16-byte header."""
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise ValueError(f"log-likelihood matrix must be 2-D, got shape {matrix.shape}")
    rows, cols = matrix.shape
    with path.open("wb") as fh:
        fh.write(_LOGLIK_HEADER.pack(LOGLIK_MAGIC, ARTIFACT_VERSION, rows, cols))
        fh.write(matrix.tobytes())
    return path


def read_loglik(path: Path) -> np.ndarray:
    payload = path.read_bytes()
    if len(payload) < _LOGLIK_HEADER.size:
        raise ValueError(f"{path} is too short to hold a header")
    magic, version, rows, cols = _LOGLIK_HEADER.unpack_from(payload)
    if magic != LOGLIK_MAGIC:
        raise ValueError(f"{path} is not a log-likelihood file (magic {magic!r})")
    if version != ARTIFACT_VERSION:
        raise ValueError(f"{path} has version {version}, expected {ARTIFACT_VERSION}")
    body = payload[_LOGLIK_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"{path} holds {len(body)} bytes for a {rows}x{cols} matrix")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()


def write_residuals(outputs: Sequence[ChainOutput], subject_ids: Sequence[str], path: Path) -> Path:
    """Mean residual across kept draws (pooled over chains), one row per tooth."""
    weights = np.array([out.kept_count for out in outputs], dtype=float)
    pooled = np.tensordot(weights / weights.sum(), np.stack([out.residual_mean for out in outputs]), axes=1)
    n, m = pooled.shape
    frame = pd.DataFrame(
        {
            "subject": np.repeat(np.asarray(subject_ids), m),
            "tooth": np.tile(np.arange(1, m + 1), n),
            "residual": pooled.reshape(-1),
        }
    )
    frame.to_csv(path, index=False)
    return path


def write_json(payload: Dict[str, Any], path: Path) -> Path:
    with path.open("w", encoding="utf-8") as fp:
        json.dump(payload, fp, ensure_ascii=False, indent=2)
    return path


def read_json(path: Path) -> Dict[str, Any]:
    with path.open("r", encoding="utf-8") as fp:
        return json.load(fp)


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Manifest and staging
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    wall_time_seconds: float = 0.0
    artifact_version: int = ARTIFACT_VERSION

    @classmethod
    def for_inputs(cls, command: str, config: Dict[str, Any], seed: int, inputs: Sequence[Path]) -> "RunManifest":
        return cls(command=command, config=config, seed=seed, inputs={str(p): file_digest(p) for p in inputs})


def _write_atomic(payload: Dict[str, Any], path: Path) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    write_json(payload, tmp)
    os.replace(tmp, path)


def _retire_manifest(out_dir: Path) -> List[str]:
    """Remove an existing manifest and return the outputs it listed."""
    path = out_dir / MANIFEST_FILE
    if not path.exists():
        return []
    logger.warning("Replacing the run in %s", out_dir)
    previous = read_json(path).get("outputs", [])
    path.unlink()
    return [name for name in previous if name != MANIFEST_FILE and Path(name).name == name]


@contextmanager
def staged_output(out_dir: Path, manifest: RunManifest) -> Iterator[Path]:
    """Yield a scratch directory; on success move its files into *out_dir*, manifest last.

    On any exception the scratch directory is removed and *out_dir* is left
    untouched.
    """
    out_dir = Path(out_dir)
    staging = out_dir.parent / f".{out_dir.name}.staging-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        yield staging
        out_dir.mkdir(parents=True, exist_ok=True)
        written = sorted(p.name for p in staging.iterdir() if p.is_file())
        previous = _retire_manifest(out_dir)
        for name in written:
            os.replace(staging / name, out_dir / name)
        for name in sorted(set(previous) - set(written)):
            (out_dir / name).unlink(missing_ok=True)
        manifest.outputs = written
        _write_atomic(asdict(manifest), out_dir / MANIFEST_FILE)
        logger.info("Wrote %d file(s) and manifest to %s", len(written), out_dir)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

@dataclass
class FittedRun:
    """A run directory read back into memory."""

    path: Path
    manifest: Dict[str, Any]
    meta: Dict[str, Any]
    outputs: List[ChainOutput]

    @property
    def pointwise_loglik(self) -> np.ndarray:
        return np.concatenate([out.pointwise_loglik for out in self.outputs])


def load_run(run_dir: Path) -> FittedRun:
    run_dir = Path(run_dir)
    if not (run_dir / MANIFEST_FILE).exists():
        raise FileNotFoundError(f"no fitted run in {run_dir} (missing {MANIFEST_FILE})")
    manifest = read_json(run_dir / MANIFEST_FILE)
    meta = read_json(run_dir / META_FILE)
    frames = read_draws(run_dir / DRAWS_FILE)
    loglik = read_loglik(run_dir / LOGLIK_FILE)
    if loglik.shape[0] != sum(len(f) for f in frames):
        raise ValueError(f"{LOGLIK_FILE} has {loglik.shape[0]} rows for {sum(len(f) for f in frames)} draws")
    chains = meta.get("chains", [{} for _ in frames])
    outputs = []
    start = 0
    for frame, info in zip(frames, chains):
        stop = start + len(frame)
        outputs.append(
            ChainOutput.from_frame(
                frame,
                pointwise_loglik=loglik[start:stop],
                acceptance=info.get("acceptance", {}),
                runtime_seconds=float(info.get("runtime_seconds", 0.0)),
                seed=int(info.get("seed", 0)),
            )
        )
        start = stop
    return FittedRun(path=run_dir, manifest=manifest, meta=meta, outputs=outputs)
