"""Named scenarios runnable from the command line."""

from __future__ import annotations

from typing import Callable, Dict, List

from .config import BenchConfig


def directional(seed: int = 0, duration: int = 3000) -> List[BenchConfig]:
    """Matched desk-scale trio: 4 clusters of 4 against a flat 16-replica baseline."""
    base = BenchConfig(clusters=4, f=1, k=2, clients=64, interval=128, payload=128, duration=duration,
                       latency="wan", proc_cost=1, seed=seed, trace="notes")
    return [base.replace(protocol=p) for p in ("bunchbft-basic", "bunchbft-x", "mir")]


SCENARIOS: Dict[str, Callable[[int], List[BenchConfig]]] = {
    "smoke": lambda seed: [BenchConfig(seed=seed, duration=1000)],
    "leader-crash": lambda seed: [BenchConfig(seed=seed, duration=2000, faults="leader-crash", k=3)],
    "equivocation": lambda seed: [BenchConfig(seed=seed, duration=2000, faults="equivocate")],
    "pre-gst": lambda seed: [BenchConfig(seed=seed, duration=2000, drain=2000, faults="pre-gst", latency="lan")],
    "cross-cluster": lambda seed: [BenchConfig(protocol="bunchbft-x", clusters=4, k=2, seed=seed, duration=1000,
                                               drain=500)],
    "directional": directional,
}
