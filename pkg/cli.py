"""Typer-based command-line interface for the multistate current-status models.

Usage (dev):
    python -m cli fit --data teeth.csv --model s-gp-dp --out runs/sgpdp
    python -m cli predict --run runs/sgpdp --profile female,smoker,bmi=35.33 --tooth 1 --baseline 56
    python -m cli config show

Exit codes: 0 success, 1 invalid input, 2 sampler failure.
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, TypeVar

import typer
from rich.console import Console
from rich.table import Table

from gaussian_tools import SamplerError
from main import (
    configure_logging,
    parse_grid,
    run_diagnostics,
    run_fit,
    run_knot_sweep,
    run_predict,
    run_simulation,
)

app = typer.Typer(help="Bayesian monotone single-index models for multistate current-status data")
console = Console()
err_console = Console(stderr=True)

T = TypeVar("T")


def _guarded(action: Callable[[], T]) -> T:
    """Run *action*, mapping input errors to exit 1 and sampler failures to exit 2."""
    try:
        return action()
    except SamplerError as exc:
        err_console.print(f"[red]Sampler failure:[/red] {exc}")
        raise typer.Exit(code=2)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        err_console.print(f"[red]Error:[/red] {exc}")
        raise typer.Exit(code=1)


def _split(value: Optional[str]) -> List[str]:
    return [v.strip() for v in (value or "").split(",") if v.strip()]


def _chain_overrides(**values) -> Dict[str, int]:
    return {k: v for k, v in values.items() if v is not None}


def _pick_variant() -> str:
    import questionary

    from config import DEFAULT_VARIANT, MODEL_VARIANTS

    choice = questionary.select(
        "Which model variant should be fitted?",
        choices=[questionary.Choice(f"{v['model']}  ({v['description']})", value=v["model"]) for v in MODEL_VARIANTS],
        default=DEFAULT_VARIANT,
    ).ask()
    if choice is None:
        raise typer.Exit(code=1)
    return choice


def _print_frame(frame, title: str, float_format: str = "{:.4g}") -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*[float_format.format(v) if isinstance(v, float) else str(v) for v in row])
    console.print(table)


# ------------- shared options -------------
_ITERATIONS = typer.Option(None, "--iterations", min=1, help="Total sweeps per chain (default 7000).")
_BURN_IN = typer.Option(None, "--burn-in", min=0, help="Sweeps discarded before keeping draws (default 5000).")
_THIN = typer.Option(None, "--thin", min=1, help="Keep every k-th sweep after burn-in.")
_CHAINS = typer.Option(None, "--chains", min=1, help="Number of chains (seeds seed, seed+1, ...).")
_SEED = typer.Option(None, "--seed", help="Base random seed.")
_VERBOSE = typer.Option(False, "--verbose", help="Enable debug logging.")
_COVARIATES = typer.Option(None, "--covariates", help="Comma-separated covariate columns to use.")
_CONTINUOUS = typer.Option(None, "--continuous", help="Comma-separated columns to standardize.")


@app.command("fit")
def fit_command(
    data: Path = typer.Option(..., "--data", help="Input CSV (subject_id, tooth_id, state, inspection_time, covariates)."),
    model: Optional[str] = typer.Option(
        None, "--model", help="Variant label, or several comma-separated labels to compare by WAIC."
    ),
    config: Optional[Path] = typer.Option(None, "--config", help="TOML or JSON config file."),
    out: Path = typer.Option(Path("runs/fit"), "--out", help="Output directory."),
    seed: Optional[int] = _SEED,
    chains: Optional[int] = _CHAINS,
    iterations: Optional[int] = _ITERATIONS,
    burn_in: Optional[int] = _BURN_IN,
    thin: Optional[int] = _THIN,
    knots: Optional[int] = typer.Option(None, "--L", min=2, help="Number of knot intervals for the link."),
    covariates: Optional[str] = _COVARIATES,
    continuous: Optional[str] = _CONTINUOUS,
    non_interactive: bool = typer.Option(False, "--non-interactive", help="Never prompt (suitable for automation)."),
    progress: bool = typer.Option(True, "--progress/--no-progress", help="Show progress bars."),
    verbose: bool = _VERBOSE,
):
    """Fit one or more model variants and write draws, WAIC likelihoods and summaries."""

    configure_logging(verbose)
    variants: List[Optional[str]] = list(_split(model))
    if not variants:
        variants = [None if (non_interactive or config) else _pick_variant()]

    table = _guarded(
        lambda: run_fit(
            data,
            variants,
            out,
            config_path=config,
            chain_overrides=_chain_overrides(
                seed=seed, chain_count=chains, iterations=iterations, burn_in=burn_in, thin=thin
            ),
            model_overrides={"L": knots} if knots else None,
            covariates=_split(covariates) or None,
            continuous=_split(continuous) if continuous is not None else None,
            progress=progress,
        )
    )
    _print_frame(table, "WAIC", "{:.1f}")
    console.print(f"[green]✓[/green] Run written to {out}")


@app.command("sweep-knots")
def sweep_knots_command(
    data: Path = typer.Option(..., "--data", help="Input CSV."),
    model: Optional[str] = typer.Option(None, "--model", help="Variant label (default s-gp-dp)."),
    config: Optional[Path] = typer.Option(None, "--config", help="TOML or JSON config file."),
    out: Path = typer.Option(Path("runs/knots"), "--out", help="Output directory."),
    knot_grid: str = typer.Option("10:45:5", "--L-grid", help="Knot counts as start:stop:step or a comma list."),
    tie_window: float = typer.Option(10.0, "--tie-window", help="WAIC difference treated as a tie."),
    covariates: Optional[str] = _COVARIATES,
    continuous: Optional[str] = _CONTINUOUS,
    seed: Optional[int] = _SEED,
    chains: Optional[int] = _CHAINS,
    iterations: Optional[int] = _ITERATIONS,
    burn_in: Optional[int] = _BURN_IN,
    thin: Optional[int] = _THIN,
    progress: bool = typer.Option(True, "--progress/--no-progress", help="Show progress bars."),
    verbose: bool = _VERBOSE,
):
    """Fit over a grid of knot counts and select the smallest L within the tie window of the best WAIC."""

    configure_logging(verbose)

    def action():
        grid = [int(v) for v in parse_grid(knot_grid)]
        return run_knot_sweep(
            data, model, out, grid, tie_window, config_path=config,
            chain_overrides=_chain_overrides(
                seed=seed, chain_count=chains, iterations=iterations, burn_in=burn_in, thin=thin
            ),
            covariates=_split(covariates) or None,
            continuous=_split(continuous) if continuous is not None else None,
            progress=progress,
        )

    frame, selected = _guarded(action)
    _print_frame(frame, "WAIC by knot count", "{:.1f}")
    console.print(f"Selected L = [bold]{selected}[/bold]")


@app.command("simulate")
def simulate_command(
    design: str = typer.Option("sim1", "--design", help="sim1 (Gaussian mixture errors) or sim2 (Gaussian/t3 errors)."),
    link: str = typer.Option("g1", "--link", help="True link: g1 or g2."),
    n: int = typer.Option(50, "--n", min=1, help="Subjects per replicate."),
    reps: int = typer.Option(20, "--reps", min=1, help="Number of replicates."),
    seed: int = typer.Option(0, "--seed", help="Base seed; replicate k uses (seed, k)."),
    models: str = typer.Option("s-gp-dp", "--models", help="Comma-separated variants fitted to every replicate."),
    out: Path = typer.Option(Path("runs/sim"), "--out", help="Output directory."),
    chains: Optional[int] = _CHAINS,
    iterations: Optional[int] = _ITERATIONS,
    burn_in: Optional[int] = _BURN_IN,
    thin: Optional[int] = _THIN,
    write_data: bool = typer.Option(False, "--write-data", help="Also write every generated dataset as CSV."),
    verbose: bool = _VERBOSE,
):
    """Run the synthetic-data replicate harness and write metrics.csv (MSE, RB, CP, MISE)."""

    configure_logging(verbose)
    metrics = _guarded(
        lambda: run_simulation(
            design, n, reps, seed, out, variants=_split(models), link_id=link,
            chain_overrides=_chain_overrides(chain_count=chains, iterations=iterations, burn_in=burn_in, thin=thin),
            write_data=write_data,
        )
    )
    summary = metrics.groupby(["model", "metric", "parameter"], as_index=False)["value"].median()
    _print_frame(summary, f"Median over {reps} replicate(s), n={n}")
    console.print(f"[green]✓[/green] {len(metrics)} metric rows written to {out / 'metrics.csv'}")


@app.command("predict")
def predict_command(
    run: Path = typer.Option(..., "--run", help="Directory written by 'fit'."),
    profile: str = typer.Option("", "--profile", help="Covariates as name or name=value tokens, comma-separated."),
    tooth: int = typer.Option(1, "--tooth", help="Tooth position (1-based)."),
    time_grid: str = typer.Option("0:100:1", "--time-grid", help="SOP times as start:stop:step or a comma list."),
    baseline: Optional[float] = typer.Option(None, "--baseline", min=0.0, help="Baseline time u for transition probabilities."),
    tp_grid: str = typer.Option("0:10:1", "--tp-grid", help="TP offsets t (probabilities at u + t)."),
    b: int = typer.Option(10_000, "--B", min=1, help="Predictive samples per posterior draw."),
    max_draws: Optional[int] = typer.Option(None, "--max-draws", min=1, help="Use at most this many evenly spaced draws."),
    seed: int = typer.Option(0, "--seed", help="Random seed."),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory (default RUN/predict)."),
    progress: bool = typer.Option(True, "--progress/--no-progress", help="Show progress bars."),
    verbose: bool = _VERBOSE,
):
    """State occupation and transition probability curves for one covariate profile."""

    configure_logging(verbose)
    curves = _guarded(
        lambda: run_predict(
            run, _split(profile), tooth, parse_grid(time_grid), out_dir=out, baseline=baseline,
            tp_times=parse_grid(tp_grid), B=b, seed=seed, max_draws=max_draws, progress=progress,
        )
    )
    last = curves[curves["kind"] == "SOP"].groupby("state_or_transition", as_index=False).last()
    _print_frame(last[["state_or_transition", "t", "mean", "lo95", "hi95"]], "SOP at the last grid time")
    console.print(f"[green]✓[/green] curves.csv written to {out or run / 'predict'}")


@app.command("diagnostics")
def diagnostics_command(
    run: Path = typer.Option(..., "--run", help="Directory written by 'fit'."),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory (default RUN/diagnostics)."),
    verbose: bool = _VERBOSE,
):
    """Split R-hat per parameter and WAIC for a fitted run."""

    configure_logging(verbose)
    frame, result = _guarded(lambda: run_diagnostics(run, out))
    _print_frame(frame, "Split R-hat")
    console.print(f"WAIC {result.waic:.1f}  (p_waic {result.p_waic:.1f}, se {result.se:.1f})")


# ------------- config command group -------------
config_app = typer.Typer(help="Inspect configuration values.")
app.add_typer(config_app, name="config")


@config_app.command("show")
def config_show():
    """Display environment settings and the model variant registry."""

    import env  # noqa: WPS433

    from config import MODEL_VARIANTS

    table = Table(title="Effective Configuration", show_header=True, header_style="bold magenta")
    table.add_column("Key", style="cyan")
    table.add_column("Value", style="green")
    try:
        threads = str(env.thread_cap())
    except ValueError as exc:
        threads = f"<invalid: {exc}>"
    table.add_row("MSMA_THREADS (effective)", threads)
    table.add_row("MSMA_LOG_LEVEL", env.LOG_LEVEL)
    console.print(table)

    variants = Table(title="Model variants", show_header=True, header_style="bold magenta")
    for column in ("model", "link_kind", "error_kind", "effect_kind", "description"):
        variants.add_column(column)
    for entry in MODEL_VARIANTS:
        variants.add_row(*(entry[c] for c in ("model", "link_kind", "error_kind", "effect_kind", "description")))
    console.print(variants)


@config_app.command("set")
def config_set(
    threads: int = typer.Option(None, "--threads", min=1, help="Worker thread cap (MSMA_THREADS)."),
    log_level: str = typer.Option(None, "--log-level", help="Default log level (MSMA_LOG_LEVEL)."),
):
    """Update defaults in the .env file (thread cap, log level)."""

    import env  # noqa: WPS433

    if threads is None and log_level is None:
        typer.echo("Nothing to update. Use --threads and/or --log-level.")
        raise typer.Exit()

    updates: Dict[str, str | int] = {}
    if threads is not None:
        updates["MSMA_THREADS"] = threads
    if log_level is not None:
        level = log_level.upper()
        if level not in getattr(logging, "getLevelNamesMapping", lambda: logging._nameToLevel)():  # <3.11 fallback
            typer.echo(f"Unknown log level '{log_level}'")
            raise typer.Exit(code=1)
        updates["MSMA_LOG_LEVEL"] = level

    path = env.write_settings(updates)
    typer.echo(f"Wrote {', '.join(updates)} to {path}")


if __name__ == "__main__":
    # Running as a module: ``python -m cli``
    app()
