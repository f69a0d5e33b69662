"""Deterministic discrete-event network simulator.

Time is an integer tick count.  Events sit in a heap keyed by (time, seq);
``seq`` grows monotonically so equal-time events run in submission order.
Every random draw comes from a generator owned by one directed link and
seeded from (run seed, src, dst), so adding traffic on one link never shifts
the delays seen on another.

Nodes are engines exposing ``on_event(now, event) -> EngineOutput``.  A node
can optionally be charged a processing cost per delivered message; it then
handles its inbox one message at a time and its outputs leave when the
message is finished.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

from .core import Block, RoundPos, Topology
from .messages import Bundle, MirPrePrepare, Msg, Prepare
from .replica import MsgArrived, Tick, TimerFired


class Deadlock(RuntimeError):
    def __init__(self, message: str, dump: str = "") -> None:
        super().__init__(message)
        self.dump = dump


class PlanExceedsF(ValueError):
    pass


# ------------------------------------------------------------------ latency

@dataclass(frozen=True)
class Fixed:
    ticks: int

    random = False

    @property
    def lo(self) -> int:
        return self.ticks

    @property
    def hi(self) -> int:
        return self.ticks

    @property
    def mean(self) -> float:
        return float(self.ticks)

    def sample(self, rng) -> int:
        return self.ticks


@dataclass(frozen=True)
class Uniform:
    lo: int
    hi: int

    random = True

    def __post_init__(self) -> None:
        if not 0 <= self.lo <= self.hi:
            raise ValueError(f"bad delay range [{self.lo}, {self.hi}]")

    @property
    def mean(self) -> float:
        return (self.lo + self.hi) / 2

    def sample(self, rng) -> int:
        return rng.randint(self.lo, self.hi)


Delay = Union[Fixed, Uniform]


@dataclass(frozen=True)
class LatencyModel:
    intra: Delay = Fixed(5)
    inter: Delay = Fixed(5)
    gst: int = 0
    pre_gst_extra: Optional[int] = None   # defaults to 10 * delta
    pre_gst_drop: float = 0.1

    @property
    def delta(self) -> int:
        """Post-GST upper bound on one-way delay."""
        return max(self.intra.hi, self.inter.hi)

    @property
    def random(self) -> bool:
        return self.intra.random or self.inter.random or self.gst > 0

    def sample(self, rng, same_region: bool, now: int) -> Optional[int]:
        """One-way delay for a message sent at ``now``; None means dropped."""
        d = (self.intra if same_region else self.inter).sample(rng)
        if now < self.gst:
            if rng.random() < self.pre_gst_drop:
                return None
            extra = 10 * self.delta if self.pre_gst_extra is None else self.pre_gst_extra
            d += rng.randint(0, extra)
        return d


# ------------------------------------------------------------------ faults

@dataclass(frozen=True)
class Crash:
    at: int = 0


@dataclass(frozen=True)
class Mute:
    start: int = 0
    end: int = 1 << 62


@dataclass(frozen=True)
class Equivocate:
    """Send a conflicting proposal to ``targets`` (default: upper half of recipients)."""

    targets: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class DelayLink:
    pair: Tuple[int, int]
    extra: int


Behavior = Union[Crash, Mute, Equivocate]


@dataclass
class FaultPlan:
    behaviors: Dict[int, List[Behavior]] = field(default_factory=dict)
    links: List[DelayLink] = field(default_factory=list)
    allow_overflow: bool = False

    @property
    def faulty(self) -> frozenset:
        return frozenset(n for n, bs in self.behaviors.items() if bs)

    def validate(self, topo: Topology) -> None:
        per = Counter(topo.cluster_of[n] for n in self.faulty if n in topo.cluster_of)
        for cid, count in sorted(per.items()):
            if count > topo[cid].f and not self.allow_overflow:
                raise PlanExceedsF(f"cluster {cid}: {count} faulty replicas, f={topo[cid].f}")


def split_proposal(msg: Msg) -> Optional[Msg]:
    """The conflicting twin of a proposal, or None if there is nothing to vary."""
    if isinstance(msg, Prepare) and msg.block.txs:
        b = msg.block
        alt = Block(b.txs[:-1], b.proposer, b.pos, b.prev)
        return Prepare(msg.sender, msg.cluster, msg.pos, alt.digest, msg.h_nb, alt,
                       msg.justify, msg.justify_block, msg.changes)
    if isinstance(msg, MirPrePrepare) and len(msg.batch) > 1:
        return MirPrePrepare(msg.sender, msg.cluster, msg.epoch, msg.leader, msg.counter, msg.batch[:-1])
    if isinstance(msg, Bundle):
        parts = [split_proposal(p) or p for p in msg.parts]
        if parts != list(msg.parts):
            return Bundle(tuple(parts))
    return None


# ------------------------------------------------------------------ trace

def _jsonable(v):
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, RoundPos):
        return [v.round, v.sub_round]
    if isinstance(v, (tuple, list, frozenset, set)):
        items = sorted(v) if isinstance(v, (set, frozenset)) else v
        return [_jsonable(x) for x in items]
    return v


class Trace:
    """Timestamped records: (time, kind, node, tag, bytes, data)."""

    def __init__(self, level: str = "full") -> None:
        if level not in ("full", "notes"):
            raise ValueError(f"unknown trace level {level!r}")
        self.level = level
        self.records: List[tuple] = []

    def add(self, time: int, kind: str, node: int, tag: str = "", nbytes: int = 0, data=None) -> None:
        self.records.append((time, kind, node, tag, nbytes, data))

    def __len__(self) -> int:
        return len(self.records)

    def notes(self, kind: Optional[str] = None) -> List[Tuple[int, int, tuple]]:
        return [(t, n, d) for t, k, n, tag, _, d in self.records
                if k == "note" and (kind is None or tag == kind)]

    def lines(self) -> Iterator[str]:
        for t, k, n, tag, nb, d in self.records:
            rec = {"time": t, "kind": k, "node": n, "tag": tag, "bytes": nb}
            if d is not None:
                rec["data"] = _jsonable(d)
            yield json.dumps(rec, separators=(",", ":"))

    def digest(self) -> str:
        h = hashlib.sha256()
        for line in self.lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line)
                fh.write("\n")


# ------------------------------------------------------------------ network

_DELIVER, _TIMER, _PROCESS, _TICK = 0, 1, 2, 3


class Network:
    def __init__(self, latency: LatencyModel, seed: int = 0, *, regions: Optional[Mapping[int, object]] = None,
                 proc_cost: Union[int, Mapping[int, int]] = 0, trace_level: str = "full",
                 topo: Optional[Topology] = None) -> None:
        self.latency = latency
        self.seed = seed
        self.regions = dict(regions or {})
        self._proc = proc_cost
        self.topo = topo
        self.engines: Dict[int, object] = {}
        self.queue: List[tuple] = []
        self.seq = 0
        self.now = 0
        self.events = 0
        self.trace = Trace(trace_level)
        self.plan = FaultPlan()
        self._crash: Dict[int, int] = {}
        self._mute: Dict[int, List[Mute]] = {}
        self._equiv: Dict[int, Equivocate] = {}
        self._extra: Dict[Tuple[int, int], int] = {}
        self._rngs: Dict[Tuple[int, int], random.Random] = {}
        self._cancelled: set = set()
        self._inbox: Dict[int, deque] = defaultdict(deque)
        self._scheduled: set = set()
        self._busy: Dict[int, int] = defaultdict(int)
        self.msg_count: Counter = Counter()
        self.msg_bytes: Counter = Counter()
        self.cross_count: Counter = Counter()
        self.cross_bytes: Counter = Counter()
        self.dropped = 0

    # -------------------------------------------------------- setup

    def add(self, node: int, engine) -> None:
        if node in self.engines:
            raise ValueError(f"node {node} registered twice")
        self.engines[node] = engine
        self._push(0, _TICK, node, None)

    def inject(self, plan: FaultPlan, topo: Optional[Topology] = None) -> None:
        topo = topo or self.topo
        if topo is not None:
            plan.validate(topo)
        self.plan = plan
        for node, behaviors in plan.behaviors.items():
            for b in behaviors:
                if isinstance(b, Crash):
                    self._crash[node] = min(b.at, self._crash.get(node, b.at))
                elif isinstance(b, Mute):
                    self._mute.setdefault(node, []).append(b)
                elif isinstance(b, Equivocate):
                    self._equiv[node] = b
                else:
                    raise TypeError(f"unknown behavior {b!r}")
        for link in plan.links:
            self._extra[link.pair] = self._extra.get(link.pair, 0) + link.extra

    def proc_cost(self, node: int) -> int:
        if isinstance(self._proc, int):
            return self._proc
        return self._proc.get(node, 0)

    def crashed(self, node: int, at: int) -> bool:
        c = self._crash.get(node)
        return c is not None and at >= c

    def _muted(self, node: int, at: int) -> bool:
        return any(m.start <= at < m.end for m in self._mute.get(node, ()))

    def _push(self, at: int, kind: int, node: int, payload) -> None:
        self.seq += 1
        heapq.heappush(self.queue, (at, self.seq, kind, node, payload))

    def _rng(self, src: int, dst: int) -> random.Random:
        key = (src, dst)
        r = self._rngs.get(key)
        if r is None:
            r = self._rngs[key] = random.Random(f"link|{self.seed}|{src}|{dst}")
        return r

    def _cross(self, src: int, dst: int) -> bool:
        if self.topo is None:
            return False
        a = self.topo.cluster_of.get(src)
        b = self.topo.cluster_of.get(dst)
        return a is not None and b is not None and a != b

    # -------------------------------------------------------- sending

    def submit(self, src: int, dests: Iterable[int], msg: Msg, now: int) -> int:
        """Schedule delivery of ``msg`` to each destination; returns the number scheduled."""
        if self.crashed(src, now) or self._muted(src, now):
            return 0
        dests = list(dests)
        alt_for: Iterable[int] = ()
        alt = None
        eq = self._equiv.get(src)
        if eq is not None:
            alt = split_proposal(msg)
            if alt is not None:
                if eq.targets is not None:
                    alt_for = set(eq.targets)
                else:
                    ordered = sorted(dests)
                    alt_for = set(ordered[len(ordered) // 2:])
        lat = self.latency
        use_rng = lat.random
        tag = type(msg).__name__
        scheduled = 0
        for dst in dests:
            m = alt if alt is not None and dst in alt_for else msg
            rng = self._rng(src, dst) if use_rng else None
            d = lat.sample(rng, self.regions.get(src) == self.regions.get(dst), now)
            if d is None:
                self.dropped += 1
                if self.trace.level == "full":
                    self.trace.add(now, "drop", dst, tag, 0, src)
                continue
            d += self._extra.get((src, dst), 0)
            size = m.wire_size
            self.msg_count[tag] += 1
            self.msg_bytes[tag] += size
            if self._cross(src, dst):
                self.cross_count[tag] += 1
                self.cross_bytes[tag] += size
            self._push(now + d, _DELIVER, dst, (src, m))
            scheduled += 1
        return scheduled

    def _apply(self, node: int, out, at: int) -> None:
        for dests, m in out.sends:
            self.submit(node, dests, m, at)
        for op in out.timers:
            if op[0] == "set":
                self._push(at + op[2], _TIMER, node, op[1])
            else:
                self._cancelled.add((node, op[1]))
        for note in out.notes:
            self.trace.add(at, "note", node, note[0], 0, note[1:])

    def _run(self, node: int, at: int, event, cost: int = 0) -> None:
        engine = self.engines.get(node)
        if engine is None:
            return
        out = engine.on_event(at, event)
        self._apply(node, out, at + cost)

    # -------------------------------------------------------- loop

    def _deliver(self, t: int, node: int, payload) -> None:
        src, msg = payload
        if self.crashed(node, t) or node not in self.engines:
            return
        if getattr(msg, "sender", None) != src:
            self.trace.add(t, "forged", node, type(msg).__name__, 0, src)
            return
        if self.trace.level == "full":
            self.trace.add(t, "deliver", node, type(msg).__name__, msg.wire_size, src)
        cost = self.proc_cost(node)
        if cost == 0:
            self._run(node, t, MsgArrived(msg))
            return
        self._inbox[node].append(msg)
        if node not in self._scheduled:
            self._scheduled.add(node)
            self._push(max(t, self._busy[node]), _PROCESS, node, None)

    def _process(self, t: int, node: int) -> None:
        box = self._inbox[node]
        if self.crashed(node, t):
            box.clear()
            self._scheduled.discard(node)
            return
        msg = box.popleft()
        cost = self.proc_cost(node)
        self._busy[node] = t + cost
        self._run(node, t, MsgArrived(msg), cost)
        if box:
            self._push(t + cost, _PROCESS, node, None)
        else:
            self._scheduled.discard(node)

    def step(self) -> bool:
        if not self.queue:
            return False
        t, _, kind, node, payload = heapq.heappop(self.queue)
        self.now = t
        self.events += 1
        if kind == _DELIVER:
            self._deliver(t, node, payload)
        elif kind == _TIMER:
            key = (node, payload)
            if key in self._cancelled:
                self._cancelled.discard(key)
            elif not self.crashed(node, t):
                if self.trace.level == "full":
                    self.trace.add(t, "timer", node, "", 0, payload)
                self._run(node, t, TimerFired(payload))
        elif kind == _PROCESS:
            self._process(t, node)
        else:
            if not self.crashed(node, t):
                self._run(node, t, Tick())
        return True

    def run(self, until: Optional[int] = None, predicate: Optional[Callable[["Network"], bool]] = None,
            max_events: Optional[int] = None) -> Trace:
        """Process events until ``until``, until ``predicate`` holds, or until the queue empties.

        Raises ``Deadlock`` if a predicate was given and the queue ran dry first.
        """
        budget = max_events
        while self.queue:
            if until is not None and self.queue[0][0] > until:
                self.now = until
                break
            if budget is not None:
                if budget <= 0:
                    break
                budget -= 1
            self.step()
            if predicate is not None and predicate(self):
                return self.trace
        if predicate is not None and not predicate(self) and not self.queue:
            raise Deadlock(f"event queue empty at t={self.now} before the predicate held", self.dump())
        return self.trace

    def dump(self) -> str:
        lines = [f"t={self.now} events={self.events} queued={len(self.queue)}"]
        for nid in sorted(self.engines):
            e = self.engines[nid]
            log = getattr(e, "log", None)
            if log is not None:
                head = log[-1].pos if log else None
                lines.append(f"  replica {nid}: log={len(log)} committed={getattr(e, 'commit_height', '?')} "
                             f"head={head} vote={getattr(e, 'vote_pos', None)} floor={getattr(e, 'floor', None)}")
            elif hasattr(e, "outstanding"):
                lines.append(f"  client {nid}: outstanding={len(e.outstanding)} done={len(e.done)}")
        return "\n".join(lines)

    @property
    def honest(self) -> List[int]:
        bad = self.plan.faulty
        return [n for n in sorted(self.engines) if n not in bad]
