"""Metrics extraction, output files and run comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .config import LOAD_KEYS, BenchConfig
from .deploy import Deployment, build

CONSENSUS_TAGS = frozenset({
    "Prepare", "PrepareVote", "Prepared", "PreparedVote", "Commit", "Bundle", "SubRoundChange",
    "GlobalPrepared", "GlobalVote", "GlobalCommit", "GlobalRoundChange",
    "MirPrePrepare", "MirPrepare", "MirCommit", "MirEpochChange",
})

CSV_COLUMNS = ("bucket_start", "bucket_end", "metric", "value")
BUCKET = 1000


class MismatchedWorkload(ValueError):
    pass


def percentile(values: Sequence[int], q: float) -> float:
    """Nearest-rank percentile; 0.0 for an empty sample."""
    if not values:
        return 0.0
    s = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(s)))
    return float(s[rank - 1])


@dataclass
class MetricsReport:
    protocol: str
    seed: int
    submitted: int
    committed_tx: int
    window_tx: int
    throughput: float
    latency_mean: float
    latency_p50: float
    latency_p99: float
    msgs_total: int
    bytes_total: int
    blocks: int
    consensus_msgs: int
    msgs_per_commit: float
    cross_bytes: int
    cross_bytes_per_block: float
    payload_bytes_per_block: float
    violations: List[str] = field(default_factory=list)
    per_phase: Dict[str, int] = field(default_factory=dict)
    per_phase_bytes: Dict[str, int] = field(default_factory=dict)
    finals: List[Tuple[int, int, int]] = field(default_factory=list)  # (submit, final, latency)

    def summary(self) -> Dict[str, object]:
        d = asdict(self)
        for k in ("violations", "per_phase", "per_phase_bytes", "finals"):
            d.pop(k)
        d["violation_count"] = len(self.violations)
        return d


def committed_blocks(dep: Deployment) -> int:
    keys = set()
    for r in dep.honest_replicas:
        if r.mode == "mir":
            keys.update(r.committed)
        else:
            keys.update((r.cid, p) for p in r.committed)
    return len(keys)


def collect(dep: Deployment, check: bool = True) -> MetricsReport:
    cfg = dep.cfg
    finals = []
    for c in dep.clients.values():
        for o in c.done.values():
            finals.append((o.submitted, o.final_at, o.final_at - o.submitted))
    finals.sort()
    window = [x for x in finals if x[1] <= cfg.duration]
    lats = [x[2] for x in finals]
    net = dep.net
    blocks = committed_blocks(dep)
    consensus = sum(v for k, v in net.msg_count.items() if k in CONSENSUS_TAGS)
    cross = sum(net.cross_bytes.values())
    committed_tx = len(finals)
    return MetricsReport(
        protocol=cfg.protocol,
        seed=cfg.seed,
        submitted=sum(c.submitted for c in dep.clients.values()),
        committed_tx=committed_tx,
        window_tx=len(window),
        throughput=len(window) * 1000 / cfg.duration if cfg.duration else 0.0,
        latency_mean=sum(lats) / len(lats) if lats else 0.0,
        latency_p50=percentile(lats, 50),
        latency_p99=percentile(lats, 99),
        msgs_total=sum(net.msg_count.values()),
        bytes_total=sum(net.msg_bytes.values()),
        blocks=blocks,
        consensus_msgs=consensus,
        msgs_per_commit=consensus / blocks if blocks else math.inf,
        cross_bytes=cross,
        cross_bytes_per_block=cross / blocks if blocks else 0.0,
        payload_bytes_per_block=committed_tx * cfg.payload / blocks if blocks else 0.0,
        violations=dep.check() if check else [],
        per_phase=dict(sorted(net.msg_count.items())),
        per_phase_bytes=dict(sorted(net.msg_bytes.items())),
        finals=finals,
    )


def run_bench(cfg: BenchConfig, check: bool = True) -> Tuple[MetricsReport, Deployment]:
    dep = build(cfg)
    dep.run()
    return collect(dep, check), dep


def csv_rows(report: MetricsReport, cfg: BenchConfig) -> List[tuple]:
    rows = []
    end = cfg.end
    for start in range(0, max(end, 1), BUCKET):
        stop = start + BUCKET
        subs = [x for x in report.finals if start <= x[0] < stop]
        fins = [x for x in report.finals if start <= x[1] < stop]
        lats = [x[2] for x in fins]
        rows.append((start, stop, "finalized", len(fins)))
        rows.append((start, stop, "finalized_submitted_here", len(subs)))
        rows.append((start, stop, "latency_mean", round(sum(lats) / len(lats), 3) if lats else 0))
        rows.append((start, stop, "latency_p50", percentile(lats, 50)))
        rows.append((start, stop, "latency_p99", percentile(lats, 99)))
    for key, value in report.summary().items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            rows.append((0, end, key, round(value, 6) if isinstance(value, float) else value))
    for tag, n in report.per_phase.items():
        rows.append((0, end, f"msgs:{tag}", n))
        rows.append((0, end, f"bytes:{tag}", report.per_phase_bytes.get(tag, 0)))
    return rows


def write_outputs(report: MetricsReport, dep: Deployment, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerows(csv_rows(report, dep.cfg))
    dep.net.trace.write(out / "trace.log")
    lines = ["# simulated ticks; throughput is finalized tx per 1000 ticks inside the submission window"]
    if dep.cfg.protocol == "mir":
        lines.append("# mir: simplified baseline (no watermarks, checkpoints or full epoch change)")
    for key, value in dep.cfg.as_dict().items():
        lines.append(f"config.{key}={value}")
    for key, value in report.summary().items():
        lines.append(f"{key}={value}")
    for v in report.violations:
        lines.append(f"violation={v}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return out


def read_summary(path) -> Dict[str, str]:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.txt"
    out = {}
    for line in p.read_text().splitlines():
        if line and not line.startswith("#") and "=" in line:
            k, v = line.split("=", 1)
            out.setdefault(k, v)
    return out


def compare(summaries: Sequence[Dict[str, str]]) -> List[Dict[str, str]]:
    """Rows sorted by throughput, highest first.  Raises if the workloads differ."""
    if len(summaries) < 2:
        raise ValueError("compare needs at least two runs")
    ref = summaries[0]
    for s in summaries[1:]:
        diff = [k for k in LOAD_KEYS if s.get(f"config.{k}") != ref.get(f"config.{k}")]
        if diff:
            raise MismatchedWorkload(f"load parameters differ: {', '.join(diff)}")
    return sorted(summaries, key=lambda s: -float(s.get("throughput", 0)))


def format_table(rows: Sequence[Dict[str, str]]) -> str:
    cols = ("protocol", "seed", "throughput", "latency_mean", "latency_p99", "msgs_per_commit", "violation_count")
    data = [[str(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(d[i]) for d in data)) for i, c in enumerate(cols)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*cols)] + [fmt.format(*d) for d in data]
    lines.append("ordering: " + " > ".join(r.get("protocol", "?") for r in rows))
    return "\n".join(lines)
