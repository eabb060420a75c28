"""Command line entry point: ``homoscale run | homogenize | calibrate``.

Exit codes: 0 all thresholds met, 2 a threshold failed, 3 bad input or resources exceeded.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import Config
from .errors import HomoscaleError, ValidationError

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 2, 3


def _guard(fn):
    try:
        return fn()
    except (HomoscaleError, MemoryError, OSError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_ERROR)


@click.group()
def main():
    """Multiscale homogenization studies."""


@main.command()
@click.argument("experiment")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def run(experiment, config_path, out):
    """Run a named experiment and write its CSV/JSON/plot files."""
    from .experiments import run_experiment

    report = _guard(lambda: run_experiment(experiment, Config.load(config_path), out or Path("results") / experiment))
    for c in report.criteria:
        click.echo(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['value']} ({c['threshold']})")
    if report.partial:
        sys.exit(EXIT_ERROR)
    sys.exit(EXIT_OK if report.passed else EXIT_FAIL)


@main.command()
@click.option("--coef", "coef_path", required=True, type=click.Path(dir_okay=False))
@click.option("--eps", required=True, help="comma separated scales, coarsest first")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default="results/homogenize")
def homogenize(coef_path, eps, config_path, out):
    """Homogenize a coefficient file at the given scales."""
    from .pipeline import homogenize as _homogenize
    from .torus_field import load_coefficient

    def go():
        try:
            scales = [float(s) for s in eps.split(",") if s.strip()]
        except ValueError as exc:
            raise ValidationError(f"cannot parse --eps: {exc}") from exc
        report = _homogenize(load_coefficient(coef_path), scales, Config.load(config_path))
        report.save(out)
        return report

    report = _guard(go)
    click.echo(json.dumps({"Abar": report.Abar.tolist(), "stages": report.stage_kinds(), "budget": report.budget}))
    for w in report.warnings:
        click.echo(f"warning: {w}", err=True)
    sys.exit(EXIT_OK)


@main.command()
@click.option("--oracle", type=click.Choice(["supercell"]), default="supercell")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(file_okay=False), default="results/calibrate")
def calibrate(oracle, config_path, out):
    """Sweep separation constants against the supercell oracle."""
    from .experiments import calibrate as _calibrate

    summary = _guard(lambda: _calibrate(Config.load(config_path), out))
    click.echo(json.dumps(summary["recommended"]))
    sys.exit(EXIT_OK if summary["recommended"] is not None else EXIT_FAIL)


if __name__ == "__main__":
    main()
