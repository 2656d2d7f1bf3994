#!/usr/bin/env python3
"""
simplexgrad
Gradient estimation and constrained stochastic optimization on probability simplices.
"""

import logging
from pathlib import Path
from typing import Callable, Optional, Tuple

import typer

from bench import prepare_output, run_bench, run_estimate, run_optimize, run_verify_moments
from config import ExperimentConfig, load_config, load_config_template, parse_config, resolve_threads
from errors import ConfigError, RunAborted, SimplexGradError

__version__ = "1.0.0"

EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

app = typer.Typer(
    name="simplexgrad",
    help="Dirichlet-perturbation gradient estimators and simplex-constrained optimizers",
    add_completion=False,
)

ConfigOption = typer.Option(None, "--config", "-c", help="Config file, or the name of a bundled config in configs/")
SeedOption = typer.Option(None, "--seed", help="Override the seed from the config")
OutOption = typer.Option(None, "--out", "-o", help="Output directory (default: the config's output entry)")
ThreadsOption = typer.Option(None, "--threads", help="Worker threads (default: $SIMPLEXGRAD_THREADS or 1)")
QuietOption = typer.Option(False, "--quiet", "-q", help="Only report errors")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Log progress")


def configure_logging(quiet: bool, verbose: bool) -> None:
    level = logging.ERROR if quiet else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def resolve_config(config: Optional[str], seed: Optional[int]) -> ExperimentConfig:
    """
    Load the experiment configuration named on the command line.

    Args:
        config: A path to a JSON file, a bundled config name, or None for the defaults
        seed: Seed override

    Returns:
        ExperimentConfig: the validated configuration
    """
    if config is None:
        cfg = ExperimentConfig()
    elif config.endswith(".json") or Path(config).exists():
        cfg = load_config(config)
    else:
        cfg = load_config_template(config)
    if seed is not None:
        cfg = parse_config(dict(cfg.model_dump(mode="json"), seed=seed))
    return cfg


def _setup(config, seed, out, threads, quiet, verbose) -> Tuple[ExperimentConfig, Path, int]:
    configure_logging(quiet, verbose)
    cfg = resolve_config(config, seed)
    workers = resolve_threads(threads)
    out_dir = prepare_output(cfg, Path(out or cfg.output))
    return cfg, out_dir, workers


def _echo(message: str, quiet: bool) -> None:
    if not quiet:
        typer.echo(message)


def _guarded(body: Callable[[], None]) -> None:
    """Run a command body, mapping failures to exit codes."""
    try:
        body()
    except ConfigError as e:
        typer.echo(f"❌ Error: {e}", err=True)
        raise typer.Exit(EXIT_CONFIG)
    except RunAborted as e:
        typer.echo(f"❌ Error: run aborted after {len(e.trace or [])} iterations: {e}", err=True)
        raise typer.Exit(EXIT_RUNTIME)
    except SimplexGradError as e:
        typer.echo(f"❌ Error: {type(e).__name__}: {e}", err=True)
        raise typer.Exit(EXIT_RUNTIME)


@app.command("verify-moments")
def verify_moments_cmd(
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
):
    """
    Check the score moment conditions of a Dirichlet mixture exactly and by sampling.

    Examples:
        python main.py verify-moments --config moments
        python main.py verify-moments --config my.json --out results/moments
    """

    def body():
        cfg, out_dir, _ = _setup(config, seed, out, threads, quiet, verbose)
        payload, passed = run_verify_moments(cfg, out_dir)
        a = payload["analytic"]
        _echo(f"ℹ️  {payload['mixture']} at n={payload['n']}: gamma={a['gamma']:.6g}", quiet)
        _echo(f"ℹ️  MC1 {a['mc1_residual']:.3g}  MC2 {a['mc2_residual']:.3g}  MC3 spread {a['mc3_spread']:.3g}", quiet)
        if not passed:
            typer.echo("❌ Moment conditions not met; see moments.json", err=True)
            raise typer.Exit(EXIT_CHECK)
        _echo(f"✅ Moment conditions hold; wrote {out_dir / 'moments.json'}", quiet)

    _guarded(body)


@app.command()
def estimate(
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
):
    """
    Run the estimator variance study over the configured parameter grid.

    Examples:
        python main.py estimate --config default
        python main.py estimate --config table4 --threads 4
    """

    def body():
        cfg, out_dir, workers = _setup(config, seed, out, threads, quiet, verbose)
        summary = run_estimate(cfg, out_dir, workers)
        for row in summary:
            label = row["estimator"] + (f"/{row['mixture']}" if row["mixture"] else "")
            _echo(f"ℹ️  {label} sigma={row['sigma']} R={row['R']} c={row['c']} n={row['n']}: v_s={row['variance_scalar']:.6g}", quiet)
        _echo(f"✅ Wrote {len(summary)} summary rows to {out_dir}", quiet)

    _guarded(body)


@app.command()
def optimize(
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
):
    """
    Run FWSA or MDSA over the configured uncertainty set.

    Examples:
        python main.py optimize --config rosenbrock_mdsa
        python main.py optimize --config mg1_fwsa --seed 7 --out results/fw
    """

    def body():
        cfg, out_dir, workers = _setup(config, seed, out, threads, quiet, verbose)
        traces = run_optimize(cfg, out_dir, workers)
        for t, trace in enumerate(traces):
            if len(trace):
                last = trace.records[-1]
                _echo(f"ℹ️  trial {t}: {len(trace)} iterations, objective {last.objective:.6g}, calls {last.oracle_calls}", quiet)
        _echo(f"✅ Wrote traces for {len(traces)} trials to {out_dir}", quiet)

    _guarded(body)


@app.command()
def bench(
    config: Optional[str] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[str] = OutOption,
    threads: Optional[int] = ThreadsOption,
    quiet: bool = QuietOption,
    verbose: bool = VerboseOption,
):
    """
    Fit variance-scaling slopes and check them against the expected exponents.

    Examples:
        python main.py bench --config table4
    """

    def body():
        cfg, out_dir, workers = _setup(config, seed, out, threads, quiet, verbose)
        result = run_bench(cfg, out_dir, workers)
        for s in result.slopes:
            status = "" if s.passed is None else (" ok" if s.passed else " FAILED")
            _echo(f"ℹ️  slope vs {s.axis}: {s.fitted_slope:.4f} (expected {s.expected}){status}", quiet)
        if result.ordering is not None:
            _echo(f"ℹ️  variance ratios vs {result.ordering['reference']}: {result.ordering['ratios']}", quiet)
        if not result.passed:
            typer.echo("❌ Benchmark checks failed; see bench.json", err=True)
            raise typer.Exit(EXIT_CHECK)
        _echo(f"✅ Benchmark checks passed; wrote {out_dir / 'bench.json'}", quiet)

    _guarded(body)


@app.command()
def version():
    """Show the version of the tool."""
    typer.echo(f"simplexgrad v{__version__}")
    typer.echo("Dirichlet-perturbation gradient estimators and simplex-constrained optimizers")


if __name__ == "__main__":
    app()
