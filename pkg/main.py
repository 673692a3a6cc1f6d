"""Orchestration behind the CLI: fit, knot sweep, simulation, prediction, diagnostics.

Every function here takes plain values, does the work, writes its output
directory and returns what the CLI needs to print.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import env
from artifacts import (
    ARTIFACT_VERSION,
    DRAWS_FILE,
    LOGLIK_FILE,
    META_FILE,
    RESIDUALS_FILE,
    RunManifest,
    load_run,
    staged_output,
    write_draws,
    write_json,
    write_loglik,
    write_residuals,
)
from config import STRUCTURAL_FIELDS, ChainConfig, ModelConfig, get_model_config, load_config_file
from data_loader import load_dataset_csv, profile_vector, save_dataset_csv
from mcmc_engine import RHAT_MIN_DRAWS, ChainOutput, gelman_rubin_table, run_chains
from model_core import CovariateScaling, CurrentStatusDataset
from posthoc import (
    PredictiveModel,
    WaicResult,
    covariate_effects,
    estimate_sop,
    estimate_tp,
    select_knot_count,
    summarize_link,
    waic,
)
from simgen import DESIGNS, SimConfig, generate_dataset, run_replicates

logger = logging.getLogger(__name__)

DEFAULT_KNOT_GRID = tuple(range(10, 50, 5))


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else env.LOG_LEVEL,
        format="%(asctime)s %(levelname)s %(name)s | %(message)s",
    )


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------

def resolve_settings(
    variant: Optional[str],
    config_path: Optional[Path] = None,
    model_overrides: Optional[Mapping[str, Any]] = None,
    chain_overrides: Optional[Mapping[str, Any]] = None,
) -> tuple[ModelConfig, ChainConfig]:
    """Combine a config file with command-line values; the command line wins."""
    file_model, file_overrides, file_chain = (None, {}, {})
    if config_path is not None:
        file_model, file_overrides, file_chain = load_config_file(config_path)
    if variant is not None:
        file_overrides = {k: v for k, v in file_overrides.items() if k not in STRUCTURAL_FIELDS}
    overrides = {**file_overrides, **(model_overrides or {})}
    chain = {**file_chain, **{k: v for k, v in (chain_overrides or {}).items() if v is not None}}
    return get_model_config(variant or file_model, overrides), ChainConfig(**chain)


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:step`` (stop included when on the lattice) or a comma list."""
    spec = spec.strip()
    if ":" in spec:
        try:
            start, stop, step = (float(v) for v in spec.split(":"))
        except ValueError as exc:
            raise ValueError(f"grid '{spec}' must be start:stop:step") from exc
        if step <= 0 or stop < start:
            raise ValueError(f"grid '{spec}' needs step > 0 and stop >= start")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return start + step * np.arange(count)
    try:
        return np.array([float(v) for v in spec.split(",") if v.strip()])
    except ValueError as exc:
        raise ValueError(f"grid '{spec}' is not a comma-separated list of numbers") from exc


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------

def _meta(
    data: CurrentStatusDataset,
    scaling: CovariateScaling,
    model_config: ModelConfig,
    chain_config: ChainConfig,
    outputs: Sequence[ChainOutput],
    result: WaicResult,
) -> Dict[str, Any]:
    return {
        "artifact_version": ARTIFACT_VERSION,
        "model": model_config.to_dict(),
        "chain": asdict(chain_config),
        "data": {"n": data.n, "m": data.m, "p": data.p, "K": data.K, "covariates": list(data.covariate_names)},
        "scaling": scaling.to_dict(),
        "chains": [
            {"seed": out.seed, "kept": out.kept_count, "acceptance": out.acceptance, "runtime_seconds": out.runtime_seconds}
            for out in outputs
        ],
        "waic": {"waic": result.waic, "p_waic": result.p_waic, "se": result.se, "elpd": result.elpd},
    }


def fit_variant(
    data: CurrentStatusDataset,
    scaling: CovariateScaling,
    model_config: ModelConfig,
    chain_config: ChainConfig,
    out_dir: Path,
    inputs: Sequence[Path] = (),
    progress: bool = True,
) -> WaicResult:
    """Run the chains for one variant and write a complete run directory."""
    started = time.perf_counter()
    manifest = RunManifest.for_inputs(
        "fit", {"model": model_config.to_dict(), "chain": asdict(chain_config)}, chain_config.seed, inputs
    )
    with staged_output(out_dir, manifest) as stage:
        outputs = run_chains(data, model_config, chain_config, progress=progress)
        pointwise = np.concatenate([out.pointwise_loglik for out in outputs])
        result = waic(pointwise)
        logger.info("%s: WAIC %.1f (p_waic %.1f, se %.1f)", model_config.variant, result.waic, result.p_waic, result.se)

        write_draws(outputs, stage / DRAWS_FILE)
        write_loglik(pointwise, stage / LOGLIK_FILE)
        write_residuals(outputs, data.subject_ids, stage / RESIDUALS_FILE)

        model = PredictiveModel.from_settings(model_config.link_kind, model_config.L, model_config.effect_kind, data.m)
        draws = [d for out in outputs for d in out.draws()]
        summarize_link(draws, model).to_csv(stage / "link.csv", index=False)
        covariate_effects(draws, model, data.covariate_names).to_csv(stage / "effects.csv", index=False)

        write_json(_meta(data, scaling, model_config, chain_config, outputs, result), stage / META_FILE)
        manifest.wall_time_seconds = time.perf_counter() - started
    return result


def run_fit(
    data_path: Path,
    variants: Sequence[Optional[str]],
    out_dir: Path,
    config_path: Optional[Path] = None,
    chain_overrides: Optional[Mapping[str, Any]] = None,
    model_overrides: Optional[Mapping[str, Any]] = None,
    covariates: Optional[Sequence[str]] = None,
    continuous: Optional[Sequence[str]] = None,
    progress: bool = True,
) -> pd.DataFrame:
    """Fit one or more variants. Several variants go to ``out_dir/<variant>/`` plus a WAIC table."""
    data, scaling = load_dataset_csv(data_path, covariates=covariates, continuous=continuous)
    logger.info("Loaded %s: n=%d, m=%d, p=%d, K=%d", data_path, data.n, data.m, data.p, data.K)
    inputs = [Path(data_path)] + ([Path(config_path)] if config_path else [])

    settings = [resolve_settings(v, config_path, model_overrides, chain_overrides) for v in variants]
    rows = []
    for model_config, chain_config in settings:
        target = out_dir if len(settings) == 1 else out_dir / model_config.variant
        result = fit_variant(data, scaling, model_config, chain_config, target, inputs, progress)
        rows.append({"model": model_config.variant, "waic": result.waic, "p_waic": result.p_waic, "lppd": float(result.lppd.sum()), "se": result.se})
    table = pd.DataFrame(rows).sort_values("waic", ignore_index=True)
    if len(settings) > 1:
        manifest = RunManifest.for_inputs("compare", {"models": list(table["model"])}, settings[0][1].seed, inputs)
        with staged_output(out_dir, manifest) as stage:
            table.to_csv(stage / "waic_comparison.csv", index=False)
    return table


def run_knot_sweep(
    data_path: Path,
    variant: Optional[str],
    out_dir: Path,
    knot_grid: Sequence[int] = DEFAULT_KNOT_GRID,
    tie_window: float = 10.0,
    config_path: Optional[Path] = None,
    chain_overrides: Optional[Mapping[str, Any]] = None,
    covariates: Optional[Sequence[str]] = None,
    continuous: Optional[Sequence[str]] = None,
    progress: bool = True,
) -> tuple[pd.DataFrame, int]:
    """Fit the variant for every L in *knot_grid*; returns the WAIC table and the selected L."""
    if not knot_grid:
        raise ValueError("knot grid is empty")
    data, _ = load_dataset_csv(data_path, covariates=covariates, continuous=continuous)
    logger.info("Loaded %s: n=%d, m=%d, p=%d, K=%d", data_path, data.n, data.m, data.p, data.K)
    inputs = [Path(data_path)] + ([Path(config_path)] if config_path else [])
    settings = {int(L): resolve_settings(variant, config_path, {"L": int(L)}, chain_overrides) for L in knot_grid}
    first_model, first_chain = next(iter(settings.values()))
    params = {"variant": first_model.variant, "L": list(settings), "covariates": list(data.covariate_names)}
    manifest = RunManifest.for_inputs("sweep-knots", params, first_chain.seed, inputs)
    table: Dict[int, float] = {}
    with staged_output(out_dir, manifest) as stage:
        for L, (model_config, chain_config) in tqdm(list(settings.items()), desc="Knot grid", disable=not progress):
            outputs = run_chains(data, model_config, chain_config, progress=False)
            table[L] = waic(np.concatenate([out.pointwise_loglik for out in outputs])).waic
            logger.info("L=%d: WAIC %.1f", L, table[L])
        selected = select_knot_count(table, tie_window)
        frame = pd.DataFrame({"L": list(table), "waic": list(table.values())})
        frame["selected"] = frame["L"] == selected
        frame.to_csv(stage / "knot_sweep.csv", index=False)
    return frame, selected


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def run_simulation(
    design: str,
    n: int,
    replicates: int,
    seed: int,
    out_dir: Path,
    variants: Sequence[str] = ("s-gp-dp",),
    link_id: str = "g1",
    chain_overrides: Optional[Mapping[str, Any]] = None,
    model_overrides: Optional[Mapping[str, Any]] = None,
    write_data: bool = False,
) -> pd.DataFrame:
    if design not in DESIGNS:
        raise ValueError(f"Unknown design '{design}'. Available: {', '.join(DESIGNS)}")
    cfg = SimConfig(n=n, link_id=link_id, error_id=DESIGNS[design], seed=seed, replicates=replicates)
    chain_config = ChainConfig(**{"seed": seed, **{k: v for k, v in (chain_overrides or {}).items() if v is not None}})
    for name in variants:
        get_model_config(name, model_overrides)
    manifest = RunManifest("simulate", {"sim": asdict(cfg), "variants": list(variants), "chain": asdict(chain_config)}, seed)
    with staged_output(out_dir, manifest) as stage:
        metrics = run_replicates(cfg, variants, chain_config, model_overrides)
        metrics.to_csv(stage / "metrics.csv", index=False)
        if write_data:
            for rep in range(replicates):
                data, _ = generate_dataset(cfg, np.random.default_rng([seed, rep]))
                save_dataset_csv(data, stage / f"data_rep{rep}.csv")
    return metrics


# ---------------------------------------------------------------------------
# Prediction and diagnostics
# ---------------------------------------------------------------------------

def _thin_draws(draws: List, limit: Optional[int]) -> List:
    if limit is None or len(draws) <= limit:
        return draws
    keep = np.unique(np.linspace(0, len(draws) - 1, limit).round().astype(int))
    return [draws[k] for k in keep]


def run_predict(
    run_dir: Path,
    profile: Sequence[str],
    tooth: int,
    times: np.ndarray,
    out_dir: Optional[Path] = None,
    baseline: Optional[float] = None,
    tp_times: Optional[np.ndarray] = None,
    B: int = 10_000,
    seed: int = 0,
    max_draws: Optional[int] = None,
    progress: bool = True,
) -> pd.DataFrame:
    """SOP curves (and TP curves when *baseline* is given) for one covariate profile and tooth (1-based)."""
    run = load_run(run_dir)
    meta = run.meta
    m = int(meta["data"]["m"])
    if not 1 <= tooth <= m:
        raise ValueError(f"tooth must lie in 1..{m}, got {tooth}")
    scaling = CovariateScaling.from_dict(meta["scaling"])
    x = profile_vector(scaling, profile)
    settings = meta["model"]
    model = PredictiveModel.from_settings(settings["link_kind"], int(settings["L"]), settings["effect_kind"], m)
    draws = _thin_draws([d for out in run.outputs for d in out.draws()], max_draws)
    rng = np.random.default_rng(seed)
    logger.info("Predicting from %d draw(s) with B=%d", len(draws), B)

    frames = [estimate_sop(draws, model, x, tooth - 1, times, B, rng, progress).to_frame()]
    if baseline is not None:
        offsets = times if tp_times is None else tp_times
        frames.append(estimate_tp(draws, model, x, tooth - 1, baseline, offsets, B, rng, progress).to_frame())
    curves = pd.concat(frames, ignore_index=True)

    target = Path(out_dir) if out_dir is not None else Path(run_dir) / "predict"
    manifest = RunManifest.for_inputs(
        "predict", {"run": str(run_dir), "profile": list(profile), "tooth": tooth, "baseline": baseline, "B": B}, seed,
        [Path(run_dir) / DRAWS_FILE],
    )
    with staged_output(target, manifest) as stage:
        curves.to_csv(stage / "curves.csv", index=False)
    return curves


def run_diagnostics(run_dir: Path, out_dir: Optional[Path] = None) -> tuple[pd.DataFrame, WaicResult]:
    """Split R-hat per scalar parameter (needs 2+ chains) and the run's WAIC."""
    run = load_run(run_dir)
    result = waic(run.pointwise_loglik)
    kept = min(len(out.beta) for out in run.outputs)
    if len(run.outputs) >= 2 and kept >= RHAT_MIN_DRAWS:
        rhat = gelman_rubin_table(run.outputs)
    else:
        logger.warning(
            "R-hat is not available for %d chain(s) of %d kept draws; it needs 2 chains of %d",
            len(run.outputs), kept, RHAT_MIN_DRAWS,
        )
        rhat = pd.Series(np.nan, index=run.outputs[0].to_frame().columns, name="rhat")
    frame = rhat.rename_axis("parameter").reset_index()
    target = Path(out_dir) if out_dir is not None else Path(run_dir) / "diagnostics"
    manifest = RunManifest.for_inputs("diagnostics", {"run": str(run_dir)}, int(run.outputs[0].seed), [Path(run_dir) / DRAWS_FILE])
    with staged_output(target, manifest) as stage:
        frame.to_csv(stage / "diagnostics.csv", index=False)
        write_json({"waic": result.waic, "p_waic": result.p_waic, "se": result.se, "elpd": result.elpd}, stage / "waic.json")
    return frame, result
