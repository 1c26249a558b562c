"""Command-line entry point: ``zofair <command> --config <path>``."""

from __future__ import annotations

import logging
import sys

import click

from .experiment import (
    ConfigError,
    ExperimentConfig,
    cmd_generate,
    cmd_invocation_bench,
    cmd_sweep,
    cmd_validate_gradients,
)
from .model import ModelFormatError, OracleProtocolError
from .schema import DatasetError, SchemaError

_USER_ERRORS = (ConfigError, SchemaError, DatasetError, ModelFormatError,
                OracleProtocolError, OSError)


def _load(ctx, path) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_file(path)
    except _USER_ERRORS as exc:
        raise click.ClickException(str(exc)) from exc
    if ctx.obj["seed"] is not None:
        cfg.rng_seed = ctx.obj["seed"]
    return cfg


def _out(ctx, cfg):
    return ctx.obj["out"] or cfg.resolve(cfg.output_dir)


def _guard(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except _USER_ERRORS as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.option("--seed", type=int, default=None, help="Override the config's rng_seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Override the config's output directory.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Worker threads for per-seed search.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed, out, jobs, verbose):
    """Black-box individual fairness testing with zero-order gradients."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"seed": seed, "out": out, "jobs": max(1, jobs)}


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.pass_context
def generate(ctx, config_path):
    """Run global then local generation and write the reports."""
    cfg = _load(ctx, config_path)
    report = _guard(cmd_generate, cfg, _out(ctx, cfg), jobs=ctx.obj["jobs"])
    agg = report.results()["aggregate"]
    click.echo(f"global {agg['global_unique']}  local {agg['local_unique']}  "
               f"total {agg['total_unique']}  "
               f"speed {report.timings()['aggregate']['total_speed']:.1f}/s")
    if not report.passed:
        click.echo(f"{report.verification_failures} stored instance(s) failed re-verification",
                   err=True)
        sys.exit(1)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--h", "h_values", required=True,
              help="Comma-separated perturbation sizes, e.g. 1e-10,1e-3,1.")
@click.pass_context
def sweep(ctx, config_path, h_values):
    """One generation run per perturbation size, same seeds throughout."""
    cfg = _load(ctx, config_path)
    try:
        hs = [float(v) for v in h_values.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc), param_hint="--h") from exc
    reports = _guard(cmd_sweep, cfg, hs, _out(ctx, cfg), jobs=ctx.obj["jobs"])
    for h, rep in zip(hs, reports):
        click.echo(f"h={h:g}  total {rep.results()['aggregate']['total_unique']}")
    if not all(r.passed for r in reports):
        sys.exit(1)


@main.command("validate-gradients")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--samples", type=int, default=1000, show_default=True)
@click.pass_context
def validate_gradients(ctx, config_path, samples):
    """Compare zero-order gradients against exact backprop gradients."""
    cfg = _load(ctx, config_path)
    report = _guard(cmd_validate_gradients, cfg, samples, _out(ctx, cfg))
    s = report.summary()
    d = s["direction_similarity_mean"]
    click.echo(f"gradient {s['gradient_similarity_mean']:.4f}  "
               f"direction {'n/a' if d is None else f'{d:.4f}'}  "
               f"probability {s['probability_similarity_mean']:.4f}")


@main.command("bench-invocations")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.pass_context
def bench_invocations(ctx, config_path):
    """Invocation counts and timings of naive vs vectored estimation."""
    cfg = _load(ctx, config_path)
    rows = _guard(cmd_invocation_bench, cfg, _out(ctx, cfg))
    for r in rows:
        click.echo(f"{r['model']:>14}  n={r['n']:<4} naive {r['naive_invocations']:>4} calls "
                   f"{r['naive_seconds'] * 1e3:8.3f} ms  vectored {r['vectored_invocations']} calls "
                   f"{r['vectored_seconds'] * 1e3:8.3f} ms")


if __name__ == "__main__":
    main()
