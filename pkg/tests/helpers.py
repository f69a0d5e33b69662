"""Tiny synchronous harness for driving engines without the simulator."""

from __future__ import annotations

from collections import deque
from typing import Callable, Dict, List, Optional

from bunchbft.core import Request, make_topology
from bunchbft.crypto import KeyRing
from bunchbft.messages import RequestMsg
from bunchbft.replica import MsgArrived, Replica, Tick, TimerFired


class Router:
    """FIFO delivery between engines; ``drop(src, dst, msg)`` filters traffic."""

    def __init__(self, engines: Dict[int, object], drop: Optional[Callable] = None) -> None:
        self.engines = engines
        self.drop = drop or (lambda s, d, m: False)
        self.queue: deque = deque()
        self.sent: List[tuple] = []
        self.timers: Dict[int, Dict[int, tuple]] = {n: {} for n in engines}
        self.now = 0

    def _collect(self, node: int, out) -> None:
        for dests, m in out.sends:
            for d in dests:
                self.sent.append((node, d, m))
                if d in self.engines and not self.drop(node, d, m):
                    self.queue.append((node, d, m))
        for op in out.timers:
            if op[0] == "set":
                self.timers[node][op[1]] = op
            else:
                self.timers[node].pop(op[1], None)

    def deliver(self, node: int, msg) -> object:
        out = self.engines[node].on_event(self.now, MsgArrived(msg))
        self._collect(node, out)
        return out

    def tick(self, node: int):
        out = self.engines[node].on_event(self.now, Tick())
        self._collect(node, out)
        return out

    def fire(self, node: int):
        """Fire every pending timer of ``node``."""
        outs = []
        for tid in sorted(self.timers[node]):
            self.timers[node].pop(tid)
            out = self.engines[node].on_event(self.now, TimerFired(tid))
            self._collect(node, out)
            outs.append(out)
        return outs

    def run(self, limit: int = 100_000) -> int:
        n = 0
        while self.queue and n < limit:
            src, dst, m = self.queue.popleft()
            out = self.engines[dst].on_event(self.now, MsgArrived(m))
            self._collect(dst, out)
            n += 1
        return n

    def of_type(self, kind, src=None, dst=None):
        return [(s, d, m) for s, d, m in self.sent
                if isinstance(m, kind) and (src is None or s == src) and (dst is None or d == dst)]


def cluster(f: int = 1, k: int = 2, clusters: int = 1, cls=Replica, **kw):
    topo = make_topology(clusters, f, k)
    keys = KeyRing(topo.replicas)
    engines = {rid: cls(rid, topo, keys, **kw) for rid in topo.replicas}
    return topo, keys, engines


def submit(router: Router, members, client: int = 100, seq: int = 1, leader: int = 0, op: bytes = b"") -> Request:
    """Hand a request to every member of a cluster, as a client would."""
    req = Request(client, seq, leader, op)
    for m in members:
        router.queue.append((client, m, RequestMsg(client, 0, req)))
    return req
