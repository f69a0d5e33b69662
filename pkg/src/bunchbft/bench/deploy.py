"""Wire a configuration into a runnable simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Set

from ..checks import run_all
from ..client import Client, TimedRequest, generate_workload
from ..core import ClusterConfig, ConfigError, Topology, make_topology
from ..crypto import Digest, KeyRing
from ..mir import MirReplica
from ..pipeline import PipelinedReplica
from ..replica import Replica
from ..simnet import Crash, Equivocate, FaultPlan, LatencyModel, Mute, Network
from .config import BenchConfig


def flat_size(cfg: BenchConfig) -> int:
    """Largest 3f+1 not above the clustered deployment's replica count."""
    total = cfg.total_replicas
    return 3 * ((total - 1) // 3) + 1


def make_fault_plan(cfg: BenchConfig, topo: Topology) -> FaultPlan:
    behaviors: Dict[int, list] = {}
    clusters = [topo[c] for c in sorted(topo.clusters)]
    if cfg.faults == "leader-crash":
        behaviors[clusters[0].members[0]] = [Crash(cfg.fault_at)]
    elif cfg.faults == "equivocate":
        for c in clusters:
            behaviors[c.members[0]] = [Equivocate()]
    elif cfg.faults == "crash-followers":
        for c in clusters:
            for m in c.members[len(c.members) - c.f:]:
                behaviors[m] = [Crash(cfg.fault_at)]
    return FaultPlan(behaviors)


@dataclass
class Deployment:
    cfg: BenchConfig
    topo: Topology
    keys: KeyRing
    latency: LatencyModel
    net: Network
    replicas: Dict[int, object]
    clients: Dict[int, Client]
    workload: Dict[int, List[TimedRequest]] = field(default_factory=dict)

    @property
    def byzantine(self) -> Set[int]:
        plan = self.net.plan
        return {n for n, bs in plan.behaviors.items() if any(isinstance(b, (Mute, Equivocate)) for b in bs)}

    @property
    def honest_replicas(self) -> list:
        bad = self.byzantine
        return [r for rid, r in sorted(self.replicas.items()) if rid not in bad]

    @property
    def submitted(self) -> Set[Digest]:
        out = set()
        for c in self.clients.values():
            out.update(o.req.digest for o in c.outstanding.values())
            out.update(o.req.digest for o in c.done.values())
        return out

    def run(self, until=None, predicate=None, max_events=None):
        return self.net.run(until=self.cfg.end if until is None and predicate is None else until,
                            predicate=predicate, max_events=max_events)

    def check(self) -> List[str]:
        return run_all(self.honest_replicas, self.submitted, self.topo, self.keys)


def build(cfg: BenchConfig) -> Deployment:
    lat = cfg.latency_model()
    if cfg.faults == "pre-gst" and cfg.gst == 0:
        lat = LatencyModel(lat.intra, lat.inter, gst=max(1, cfg.duration // 2))
    regions: Dict[int, int] = {}
    if cfg.protocol == "mir":
        n = flat_size(cfg)
        f = (n - 1) // 3
        if n < 1:
            raise ConfigError("mir needs at least one replica")
        topo = Topology([ClusterConfig(0, tuple(range(n)), f, f + 1)])
        for i in range(n):
            regions[i] = i * cfg.clusters // n
    else:
        topo = make_topology(cfg.clusters, cfg.f, cfg.k)
        for rid, cid in topo.cluster_of.items():
            regions[rid] = cid
    keys = KeyRing(topo.replicas, cfg.crypto, seed=b"bench")

    intra, inter = lat.intra.mean, lat.inter.mean
    far = inter if cfg.clusters > 1 else intra
    if cfg.protocol == "mir":
        timeout = cfg.timeout or max(10, int(10 * far))
    else:
        timeout = cfg.timeout or max(10, int(10 * intra))
    gtimeout = cfg.global_timeout or max(10, int(10 * inter))
    retry = cfg.retry or max(200, int(40 * max(intra, inter)))

    replicas: Dict[int, object] = {}
    for rid in topo.replicas:
        if cfg.protocol == "mir":
            replicas[rid] = MirReplica(rid, topo[0], timeout=timeout, max_block=cfg.max_block)
        elif cfg.protocol == "bunchbft-basic":
            replicas[rid] = Replica(rid, topo, keys, timeout=timeout, max_block=cfg.max_block)
        elif cfg.protocol == "bunchbft-pipelined":
            replicas[rid] = PipelinedReplica(rid, topo, keys, timeout=timeout, max_block=cfg.max_block)
        else:
            replicas[rid] = PipelinedReplica(rid, topo, keys, timeout=timeout, max_block=cfg.max_block,
                                             cross_cluster=True, global_timeout=gtimeout)

    first_client = max(topo.replicas) + 1
    cids = list(range(first_client, first_client + cfg.clients))
    home = {c: i % cfg.clusters for i, c in enumerate(cids)}
    if cfg.protocol == "mir":
        targets = {c: topo[0].members for c in cids}
        fs = {c: topo[0].f for c in cids}
    else:
        targets = {c: topo[home[c]].members for c in cids}
        fs = {c: topo[home[c]].f for c in cids}
    workload = generate_workload(cids, cfg.interval, cfg.duration, cfg.seed, targets,
                                 payload_size=cfg.payload, preload=cfg.preload)

    net = Network(lat, cfg.seed, regions={**regions, **home},
                  proc_cost={rid: cfg.proc_cost for rid in topo.replicas}, trace_level=cfg.trace, topo=topo)
    clients: Dict[int, Client] = {}
    for c in cids:
        clients[c] = Client(c, targets[c], fs[c], workload[c], retry=retry,
                            cluster=0 if cfg.protocol == "mir" else home[c])
    for rid, eng in replicas.items():
        net.add(rid, eng)
    for c, eng in clients.items():
        net.add(c, eng)
    net.inject(make_fault_plan(cfg, topo), topo)
    return Deployment(cfg, topo, keys, lat, net, replicas, clients, workload)
