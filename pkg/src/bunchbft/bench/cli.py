"""``bench`` command line."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from ..core import ConfigError
from .config import PROTOCOLS, load_config
from .report import MismatchedWorkload, compare, format_table, read_summary, run_bench, write_outputs
from .scenarios import SCENARIOS


@click.group()
def main() -> None:
    """Deterministic BunchBFT / MirBFT benchmark harness (simulated ticks)."""


def _print_summary(report) -> None:
    for key, value in report.summary().items():
        click.echo(f"{key}={value}")
    for v in report.violations[:20]:
        click.echo(f"violation={v}")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Simulation seed (overrides the file).")
@click.option("--protocol", type=click.Choice(PROTOCOLS), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Directory for metrics.csv, trace.log and summary.txt.")
def run(config, seed, protocol, out_dir) -> None:
    """Run one benchmark from a YAML CONFIG."""
    try:
        cfg = load_config(config, seed=seed, protocol=protocol)
    except ConfigError as e:
        raise click.UsageError(str(e))
    report, dep = run_bench(cfg)
    out = Path(out_dir or f"bench-out/{cfg.protocol}-s{cfg.seed}")
    write_outputs(report, dep, out)
    _print_summary(report)
    click.echo(f"wrote {out}")
    if report.violations:
        sys.exit(2)


@main.command(name="compare")
@click.argument("dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
def compare_cmd(dirs) -> None:
    """Tabulate matched runs by throughput."""
    try:
        rows = compare([read_summary(d) for d in dirs])
    except (MismatchedWorkload, ValueError) as e:
        raise click.ClickException(str(e))
    click.echo(format_table(rows))


@main.command()
@click.argument("name", type=click.Choice(sorted(SCENARIOS)))
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
def scenario(name, seed, out_dir) -> None:
    """Run a named scenario and print its summaries."""
    reports = []
    failed = False
    for cfg in SCENARIOS[name](seed):
        report, dep = run_bench(cfg)
        reports.append(report)
        click.echo(f"[{cfg.protocol}]")
        _print_summary(report)
        failed |= bool(report.violations)
        if out_dir:
            write_outputs(report, dep, Path(out_dir) / cfg.protocol)
    if len(reports) > 1:
        rows = sorted((r.summary() for r in reports), key=lambda s: -s["throughput"])
        click.echo(format_table([{k: str(v) for k, v in r.items()} for r in rows]))
    if failed:
        sys.exit(2)


if __name__ == "__main__":  # pragma: no cover
    main()
