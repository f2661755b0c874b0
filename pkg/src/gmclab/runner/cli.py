"""Command line: ``gmc-lab run|validate|list-experiments``.

Exit codes: 0 when every acceptance check passes, 1 when a check fails (or a
numeric failure stops the run), 2 for configuration and usage errors.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click

from ..errors import ConfigError, GmcLabError
from .config import EXPERIMENTS, OUT_ENV, config_hash, validate_config
from .emit import Report, emit_results
from .experiments import get_experiment

__all__ = ["main", "run_experiment"]

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def run_experiment(cfg, out_dir=None):
    """Run ``cfg.experiment`` and write its artifacts.

    Returns ``(exit_code, report, paths)``.  Numeric and resource failures are
    recorded in the report with the module they came from, and the rows
    gathered so far are still written.
    """
    out = Path(out_dir or os.environ.get(OUT_ENV) or cfg.output_dir)
    report = Report(cfg.experiment)
    fn = get_experiment(cfg.experiment)
    try:
        fn(cfg, report)
    except ConfigError:
        raise
    except GmcLabError as exc:
        mod = type(exc).__module__
        tb = exc.__traceback__
        while tb.tb_next is not None:
            tb = tb.tb_next
        where = tb.tb_frame.f_globals.get("__name__", mod)
        report.error = f"{type(exc).__name__} in {where}: {exc}"
    paths = emit_results(
        report, out, config=cfg.model_dump(mode="json"), config_sha=config_hash(cfg), seed=cfg.seed
    )
    return (EXIT_OK if report.passed else EXIT_FAIL), report, paths


def _load(path, overrides=None):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([("", f"cannot read {path}: {exc.strerror}")]) from None
    return validate_config(text, overrides)


@click.group()
def cli():
    """Critical chaos simulation and verification lab."""


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--replicas", type=int, default=None, help="Override the replica count.")
def run(config, out_dir, seed, replicas):
    """Run the experiment described by CONFIG (a JSON file)."""
    try:
        cfg = _load(config, {"seed": seed, "replicas": replicas})
        code, report, paths = run_experiment(cfg, out_dir)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    for c in report.checks:
        click.echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name}")
    if report.error:
        click.echo(f"ERROR {report.error}", err=True)
    click.echo(f"wrote {', '.join(str(p) for p in paths)}")
    sys.exit(code)


@cli.command()
@click.argument("config", type=click.Path(dir_okay=False))
def validate(config):
    """Validate CONFIG and print the normalized document."""
    try:
        cfg = _load(config)
    except ConfigError as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))


@cli.command("list-experiments")
def list_experiments():
    """Print the registered experiment names."""
    for name in EXPERIMENTS:
        click.echo(name)


def main(argv=None):
    # click exits 2 on its own usage errors, matching the config-error code
    cli.main(args=argv, prog_name="gmc-lab")
