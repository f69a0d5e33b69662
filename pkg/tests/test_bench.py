from __future__ import annotations

import csv

import pytest
from click.testing import CliRunner

from bunchbft.bench.cli import main
from bunchbft.bench.config import BenchConfig, load_config
from bunchbft.bench.deploy import build, flat_size
from bunchbft.bench.report import (CSV_COLUMNS, MismatchedWorkload, compare, percentile, read_summary, run_bench,
                                   write_outputs)
from bunchbft.core import ConfigError


def write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_yaml_nesting_and_overrides(tmp_path):
    p = write(tmp_path, "protocol: mir\nseed: 4\ncluster: {clusters: 2, f: 1, k: 3}\ncrypto: {backend: real}\n")
    cfg = load_config(p, seed=9, protocol=None)
    assert (cfg.protocol, cfg.seed, cfg.clusters, cfg.k, cfg.crypto) == ("mir", 9, 2, 3, "real")


@pytest.mark.parametrize("text,msg", [
    ("protcol: mir\n", "unknown keys"),
    ("- 1\n- 2\n", "mapping"),
    ("protocol: raft\n", "protocol"),
    ("cluster: {f: 2, k: 2}\n", "must exceed"),
    ("faults: meteor\n", "faults"),
])
def test_bad_configs_are_rejected(tmp_path, text, msg):
    with pytest.raises(ConfigError, match=msg):
        load_config(write(tmp_path, text))


def test_percentile_nearest_rank():
    assert percentile([], 50) == 0.0
    assert percentile([5, 1, 3, 2, 4], 50) == 3.0
    assert percentile(list(range(1, 101)), 99) == 99.0
    assert percentile([7], 99) == 7.0


def test_flat_size_rounds_down_to_3f_plus_1():
    assert flat_size(BenchConfig(clusters=4, f=1, k=2)) == 16
    assert flat_size(BenchConfig(clusters=2, f=1, k=2)) == 7
    assert flat_size(BenchConfig(clusters=3, f=2, k=3)) == 19


def test_report_counts_and_csv(tmp_path):
    cfg = BenchConfig(clients=2, interval=50, duration=500, drain=300, seed=2, trace="notes")
    report, dep = run_bench(cfg)
    assert report.violations == []
    assert report.submitted == 20 and report.committed_tx == 20
    assert report.blocks == len(dep.replicas[0].committed)
    assert report.throughput == report.window_tx * 1000 / 500
    out = write_outputs(report, dep, tmp_path / "o")
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert tuple(rows[0]) == CSV_COLUMNS
    fin = sum(int(r[3]) for r in rows[1:] if r[2] == "finalized")
    assert fin == report.committed_tx
    s = read_summary(out)
    assert s["config.protocol"] == "bunchbft-basic" and s["violation_count"] == "0"


def test_compare_sorts_and_rejects_mismatched(tmp_path):
    a = {"protocol": "x", "throughput": "5", **{f"config.{k}": "1" for k in ("clients", "interval")}}
    b = dict(a, protocol="y", throughput="9")
    assert [r["protocol"] for r in compare([a, b])] == ["y", "x"]
    with pytest.raises(MismatchedWorkload, match="interval"):
        compare([a, dict(b, **{"config.interval": "2"})])
    with pytest.raises(ValueError):
        compare([a])


def test_csv_and_trace_are_reproducible(tmp_path):
    cfg = BenchConfig(protocol="bunchbft-pipelined", clients=2, interval=40, duration=400, drain=300,
                      latency="lan", seed=11)
    files = []
    for name in ("a", "b"):
        report, dep = run_bench(cfg)
        out = write_outputs(report, dep, tmp_path / name)
        files.append(((out / "metrics.csv").read_bytes(), (out / "trace.log").read_bytes()))
    assert files[0] == files[1]


def test_every_protocol_builds_and_commits():
    for p in ("bunchbft-basic", "bunchbft-pipelined", "bunchbft-x", "mir"):
        cfg = BenchConfig(protocol=p, clusters=2, clients=4, interval=50, duration=300, drain=1500, seed=1,
                          trace="notes")
        report, dep = run_bench(cfg)
        assert report.violations == [] and report.committed_tx == report.submitted > 0, p


def test_cli_run_compare_and_scenario(tmp_path):
    cli = CliRunner()
    cfg = write(tmp_path, "clients: 2\ninterval: 50\nduration: 300\ndrain: 300\n")
    r1 = cli.invoke(main, ["run", str(cfg), "--out", str(tmp_path / "a")])
    assert r1.exit_code == 0, r1.output
    assert "throughput=" in r1.output and (tmp_path / "a" / "metrics.csv").exists()
    r2 = cli.invoke(main, ["run", str(cfg), "--protocol", "mir", "--out", str(tmp_path / "b")])
    assert r2.exit_code == 0, r2.output
    r3 = cli.invoke(main, ["compare", str(tmp_path / "a"), str(tmp_path / "b")])
    assert r3.exit_code == 0 and "ordering:" in r3.output
    other = write(tmp_path, "clients: 3\ninterval: 50\nduration: 300\n", "d.yaml")
    cli.invoke(main, ["run", str(other), "--out", str(tmp_path / "c")])
    r4 = cli.invoke(main, ["compare", str(tmp_path / "a"), str(tmp_path / "c")])
    assert r4.exit_code != 0 and "clients" in r4.output
    r5 = cli.invoke(main, ["run", str(write(tmp_path, "bogus: 1\n", "e.yaml"))])
    assert r5.exit_code == 2 and "unknown keys" in r5.output
    r6 = cli.invoke(main, ["scenario", "smoke", "--seed", "3"])
    assert r6.exit_code == 0 and "[bunchbft-basic]" in r6.output


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for p in sorted(root.glob("*.yaml")):
        assert isinstance(load_config(p), BenchConfig)


def test_fault_plans_are_wired():
    dep = build(BenchConfig(clusters=2, faults="crash-followers", fault_at=7))
    crashed = sorted(n for n, bs in dep.net.plan.behaviors.items())
    assert crashed == [3, 7]
    assert dep.byzantine == set()
    eq = build(BenchConfig(faults="equivocate"))
    assert eq.byzantine == {0}
