"""Simulated clients and workload generation."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Set, Tuple

from .core import ClientId, ReplicaId, Request
from .messages import Reply, RequestMsg
from .replica import EngineOutput, MsgArrived, TimerFired, Tick


class TimedRequest(NamedTuple):
    at: int
    req: Request


def generate_workload(clients: Sequence[ClientId], interval: int, duration: int, seed: int,
                      leaders: Dict[ClientId, Sequence[ReplicaId]], *, payload_size: int = 128,
                      start: int = 0, preload: int = 0) -> Dict[ClientId, List[TimedRequest]]:
    """Open-loop request stream per client.

    Each client emits one request every ``interval`` ticks in ``[start,
    start + duration)``, or ``preload`` requests all at ``start`` when
    ``preload`` is set.  The preferred leader is drawn uniformly from
    ``leaders[client]`` with a per-client seeded generator.
    """
    out: Dict[ClientId, List[TimedRequest]] = {}
    for c in clients:
        rng = random.Random(f"workload|{seed}|{c}")
        if preload:
            times = [start] * preload
        else:
            times = list(range(start, start + duration, interval))
        reqs = []
        for seq, t in enumerate(times, 1):
            lr = rng.choice(list(leaders[c]))
            reqs.append(TimedRequest(t, Request(c, seq, lr, b"op%d" % seq, payload_size)))
        out[c] = reqs
    return out


@dataclass
class Outstanding:
    req: Request
    submitted: int
    replies: Dict[bytes, Set[ReplicaId]] = field(default_factory=dict)
    final_at: Optional[int] = None


class Client:
    """Sends requests to ``targets`` and waits for f+1 matching replies.

    Unanswered requests are resent to all targets every ``retry`` ticks.
    """

    mode = "client"

    def __init__(self, cid: ClientId, targets: Sequence[ReplicaId], f: int,
                 schedule: Sequence[TimedRequest], *, retry: int = 1000, cluster: int = 0) -> None:
        self.id = cid
        self.cluster = cluster
        self.targets = tuple(targets)
        self.f = f
        self.schedule = sorted(schedule, key=lambda t: (t.at, t.req.client_seq))
        self.retry = retry
        self.next = 0
        self.outstanding: Dict[int, Outstanding] = {}
        self.done: Dict[int, Outstanding] = {}
        self._timers: Dict[int, Tuple[str, int]] = {}
        self._tseq = 0
        self.now = 0
        self._out = EngineOutput()

    def _timer(self, kind: str, arg: int, delay: int) -> None:
        self._tseq += 1
        self._timers[self._tseq] = (kind, arg)
        self._out.timers.append(("set", self._tseq, delay))

    def on_event(self, now: int, event) -> EngineOutput:
        self.now = now
        self._out = out = EngineOutput()
        if isinstance(event, Tick):
            self._submit_due()
        elif isinstance(event, TimerFired):
            kind, arg = self._timers.pop(event.timer_id, (None, 0))
            if kind == "submit":
                self._submit_due()
            elif kind == "retry" and arg in self.outstanding:
                o = self.outstanding[arg]
                out.notes.append(("retry", self.id, arg))
                out.sends.append((self.targets, RequestMsg(self.id, self.cluster, o.req)))
                self._timer("retry", arg, self.retry)
        elif isinstance(event, MsgArrived) and isinstance(event.msg, Reply):
            self._on_reply(event.msg)
        return out

    def _submit_due(self) -> None:
        while self.next < len(self.schedule) and self.schedule[self.next].at <= self.now:
            tr = self.schedule[self.next]
            self.next += 1
            o = Outstanding(tr.req, self.now)
            self.outstanding[tr.req.client_seq] = o
            self._out.notes.append(("submit", self.id, tr.req.client_seq, tr.req.digest))
            self._out.sends.append((self.targets, RequestMsg(self.id, self.cluster, tr.req)))
            self._timer("retry", tr.req.client_seq, self.retry)
        if self.next < len(self.schedule):
            self._timer("submit", 0, self.schedule[self.next].at - self.now)

    def _on_reply(self, msg: Reply) -> None:
        o = self.outstanding.get(msg.client_seq)
        if o is None or msg.digest != o.req.digest or msg.sender not in self.targets:
            return
        who = o.replies.setdefault(msg.digest, set())
        who.add(msg.sender)
        if len(who) >= self.f + 1:
            o.final_at = self.now
            del self.outstanding[msg.client_seq]
            self.done[msg.client_seq] = o
            self._out.notes.append(("final", self.id, msg.client_seq, msg.digest, self.now - o.submitted))

    @property
    def submitted(self) -> int:
        return len(self.outstanding) + len(self.done)
