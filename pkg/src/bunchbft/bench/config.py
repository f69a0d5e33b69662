"""Benchmark configuration and YAML loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from ..core import ConfigError
from ..simnet import Fixed, LatencyModel, Uniform

PROTOCOLS = ("bunchbft-basic", "bunchbft-pipelined", "bunchbft-x", "mir")
FAULT_PLANS = ("none", "leader-crash", "equivocate", "crash-followers", "pre-gst")

# Ticks are read as milliseconds for the wan preset; the numbers are
# representative inter-region figures, not measurements.
PRESETS = ("uniform", "lan", "wan")

# keys that must match for two runs to count as the same workload
LOAD_KEYS = ("clients", "interval", "preload", "payload", "duration", "latency", "delta")


@dataclass
class BenchConfig:
    protocol: str = "bunchbft-basic"
    clusters: int = 1
    f: int = 1
    k: int = 2
    clients: int = 4
    interval: int = 100
    preload: int = 0
    payload: int = 128
    duration: int = 2000
    drain: int = 0
    latency: str = "uniform"
    delta: int = 5
    gst: int = 0
    faults: str = "none"
    fault_at: int = 0
    seed: int = 0
    proc_cost: int = 0
    max_block: Optional[int] = None
    timeout: Optional[int] = None
    global_timeout: Optional[int] = None
    retry: Optional[int] = None
    crypto: str = "test"
    trace: str = "full"
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.faults not in FAULT_PLANS:
            raise ConfigError(f"faults must be one of {FAULT_PLANS}, got {self.faults!r}")
        if self.latency not in PRESETS:
            raise ConfigError(f"latency preset must be one of {PRESETS}, got {self.latency!r}")
        if self.clusters < 1 or self.clients < 0 or self.f < 0:
            raise ConfigError("clusters >= 1, clients >= 0 and f >= 0 required")
        if self.k <= self.f:
            raise ConfigError(f"k={self.k} must exceed f={self.f}")
        if self.interval <= 0 or self.delta <= 0:
            raise ConfigError("interval and delta must be positive")

    @property
    def n(self) -> int:
        return 3 * self.f + 1

    @property
    def total_replicas(self) -> int:
        return self.clusters * self.n

    @property
    def end(self) -> int:
        return self.duration + self.drain

    def latency_model(self) -> LatencyModel:
        d = self.delta
        if self.latency == "uniform":
            intra = inter = Fixed(d)
        elif self.latency == "lan":
            intra = inter = Uniform(1, d)
        else:
            intra, inter = Uniform(5, 15), Uniform(150, 250)
        return LatencyModel(intra, inter, gst=self.gst)

    def replace(self, **changes) -> "BenchConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d.pop("extra")
        return d


def _flatten(data: Mapping[str, Any]) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for key, value in data.items():
        if key == "crypto" and isinstance(value, Mapping):
            out["crypto"] = value.get("backend", "test")
        elif key == "cluster" and isinstance(value, Mapping):
            out.update(value)
        else:
            out[key] = value
    return out


def load_config(path, **overrides) -> BenchConfig:
    """Read a YAML config; ``overrides`` that are not None win over file values."""
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: expected a mapping at top level")
    data = _flatten(data)
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(BenchConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return BenchConfig(**data)
