"""Command line entry point: ``tumorsurrogate <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 stage failure.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import replace

import click

from . import __version__
from .learning import STRIDES, LearningConfig
from .pipeline import (
    FULL_REPLICATIONS,
    ExperimentPlan,
    MissingArtifactsError,
    StageError,
    default_sweep,
    emit_plot_data,
    run_pipeline,
)

LIBRARY_CHOICES = ("complete", "constrained", "union12", "two-species-17")


def _options(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="TOML plan file (or a previous run's manifest.json)."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Run directory."),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Master seed."),
        click.option("--replications", type=click.IntRange(min=1), help="Replications per scenario."),
        click.option("--full-scale", is_flag=True, help=f"Use {FULL_REPLICATIONS} replications per scenario."),
        click.option("--stride", type=click.Choice([str(s) for s in STRIDES]), help="Only this stride."),
        click.option("--derivative", type=click.Choice(["central", "kalman"]), help="Only this derivative method."),
        click.option("--library", type=click.Choice(LIBRARY_CHOICES), help="Only this library."),
        click.option("--threshold", type=click.FloatRange(min=0.0), help="Relative pruning threshold."),
        click.option("--workers", type=click.IntRange(min=1), help="Processes for the replications."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def build_plan(config_path=None, out_dir=None, seed=None, replications=None, full_scale=False,
               stride=None, derivative=None, library=None, threshold=None, workers=None) -> ExperimentPlan:
    """Defaults, then the config file, then command line flags."""
    if full_scale and replications is not None and replications != FULL_REPLICATIONS:
        raise click.UsageError("--full-scale and --replications disagree")
    try:
        plan = ExperimentPlan.from_file(config_path) if config_path else ExperimentPlan()
        changes = {}
        if out_dir is not None:
            changes["out_dir"] = out_dir
        if seed is not None:
            changes["master_seed"] = seed
        if full_scale:
            changes["replications"] = FULL_REPLICATIONS
        elif replications is not None:
            changes["replications"] = replications
        if workers is not None:
            changes["workers"] = workers
        if any(v is not None for v in (stride, derivative, library, threshold)):
            current = plan.learning
            changes["learning"] = default_sweep(
                libraries=[library] if library else _unique(c.library for c in current),
                derivatives=[derivative] if derivative else _unique(c.derivative_method for c in current),
                strides=[int(stride)] if stride else _unique(c.stride for c in current),
                threshold=threshold if threshold is not None else current[0].prune_threshold,
            )
        return replace(plan, **changes) if changes else plan
    except (ValueError, TypeError, KeyError) as exc:
        raise click.UsageError(f"bad configuration: {exc}") from exc


def _unique(values):
    out = []
    for v in values:
        if v not in out:
            out.append(v)
    return out


@click.group()
@click.version_option(__version__, prog_name="tumorsurrogate")
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def cli(verbose):
    """Simulate the tumour ABM, learn reaction surrogates and analyse their equilibria."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _run(stages, **kw):
    plan = build_plan(**kw)
    manifest = run_pipeline(plan, stages)
    click.echo(f"{'+'.join(stages)}: {len(manifest.hashes)} artifacts in {plan.out_dir}")


@cli.command()
@_options
def simulate(**kw):
    """Run the ABM ensembles for every scenario."""
    _run(("simulate",), **kw)


@cli.command()
@_options
def learn(**kw):
    """Learn per-scenario models over the configured sweep and select one."""
    _run(("learn",), **kw)


@cli.command()
@_options
def analyze(**kw):
    """Refit, compute steady states and fit the trend lines."""
    _run(("analyze",), **kw)


@cli.command()
@_options
def pipeline(**kw):
    """simulate, learn, analyze and plot-data in one run."""
    _run(("simulate", "learn", "analyze", "plot"), **kw)


@cli.command("plot-data")
@_options
def plot_data(**kw):
    """Write plot-ready CSVs from an analysed run."""
    _run(("plot",), **kw)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="tumorsurrogate", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (StageError, MissingArtifactsError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def run() -> None:
    sys.exit(main())


__all__ = ["cli", "main", "run", "build_plan", "emit_plot_data", "LearningConfig"]
