"""A deliberately small MirBFT-style baseline.

Every replica is a leader.  The request digest space is split into one bucket
per leader and the split rotates by one bucket every epoch.  Each leader runs
one PBFT-like instance at a time over the whole replica set: pre-prepare from
the leader, then all-to-all prepare and commit, each needing 2f+1 matching
messages.  Committed batches are identified by (epoch, leader, counter).

Left out on purpose: watermarks, checkpoints, request signatures and Mir's
real epoch-change protocol.  The epoch change here is a stub: replicas that
time out broadcast the leaders they suspect, and 2f+1 such messages move
everyone to the next epoch.  The leader set never shrinks, so every replica
agrees on bucket ownership; rotation alone moves a stuck bucket to a new
owner.  Suspects are only recorded for diagnostics.
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Set, Tuple

from .core import ClusterConfig, ReplicaId, Request
from .crypto import Digest
from .messages import (MirCommit, MirEpochChange, MirPrepare, MirPrePrepare, Msg, Reply, RequestMsg,
                       mir_batch_digest)
from .replica import EngineOutput, MsgArrived, TimerFired

Slot = Tuple[int, int, int]  # (epoch, leader, counter)


def bucket_of(digest: Digest, n_buckets: int) -> int:
    """Bucket index from the first 8 digest bytes, read as a fraction of 2**64."""
    return (int.from_bytes(digest[:8], "big") * n_buckets) >> 64


@dataclass(frozen=True)
class BucketMap:
    epoch: int
    leaders: Tuple[ReplicaId, ...]

    def owner_of_bucket(self, b: int) -> ReplicaId:
        return self.leaders[(b + self.epoch) % len(self.leaders)]

    @property
    def buckets(self) -> Dict[ReplicaId, List[Tuple[int, int]]]:
        """Leader -> half-open ranges of the 64-bit digest prefix it owns."""
        n = len(self.leaders)
        out: Dict[ReplicaId, List[Tuple[int, int]]] = {l: [] for l in self.leaders}
        for b in range(n):
            lo = -(-(b << 64) // n)
            hi = -(-((b + 1) << 64) // n)
            out[self.owner_of_bucket(b)].append((lo, hi))
        return out


def assign_bucket(bmap: BucketMap, digest: Digest) -> ReplicaId:
    return bmap.owner_of_bucket(bucket_of(digest, len(bmap.leaders)))


@dataclass
class Instance:
    batch: Tuple[Digest, ...]
    digest: Digest
    prepares: Set[ReplicaId] = field(default_factory=set)
    commits: Set[ReplicaId] = field(default_factory=set)
    sent_commit: bool = False
    done: bool = False


class MirReplica:
    mode = "mir"

    def __init__(self, rid: ReplicaId, cfg: ClusterConfig, *, timeout: int = 100,
                 max_block: Optional[int] = None) -> None:
        self.id = rid
        self.cfg = cfg
        self.cid = cfg.cluster_id
        self.quorum = 2 * cfg.f + 1
        self.base_timeout = timeout
        self.max_block = max_block
        self.bmap = BucketMap(0, cfg.members)
        self.requests: Dict[Digest, Request] = {}
        self.committed_tx: Set[Digest] = set()
        self.in_flight: Set[Digest] = set()
        self.queue: Dict[Digest, None] = {}   # txs this replica owns, in arrival order
        self.counter = 0
        self.own: Optional[Slot] = None
        self.instances: Dict[Slot, Instance] = {}
        self.preprepared: Dict[Slot, Digest] = {}
        self.deferred: Dict[Slot, MirPrePrepare] = {}
        self.committed: Dict[Slot, Digest] = {}
        self.commit_times: Dict[Slot, int] = {}
        self.changes: Dict[int, Dict[ReplicaId, Tuple[ReplicaId, ...]]] = {}
        self.sent_change: Set[int] = set()
        self.future: List[Msg] = []
        self.seen_at: Dict[Digest, int] = {}
        self.failures = 0
        self.timer: Optional[int] = None
        self._tseq = 0
        self._progress = 0
        self.metrics: Counter = Counter()
        self.now = 0
        self._out = EngineOutput()
        self._local: Deque[Msg] = deque()

    # ------------------------------------------------------------ plumbing

    def on_event(self, now: int, event) -> EngineOutput:
        self.now = now
        self._out = out = EngineOutput()
        if isinstance(event, MsgArrived):
            self._dispatch(event.msg)
        elif isinstance(event, TimerFired):
            if event.timer_id == self.timer:
                self.timer = None
                self._on_timeout()
        while True:
            while self._local:
                self._dispatch(self._local.popleft())
            self._maybe_propose()
            if not self._local:
                break
        self._update_timer()
        return out

    def _send(self, dests: Sequence[int], msg: Msg) -> None:
        remote = tuple(d for d in dests if d != self.id)
        if remote:
            self._out.sends.append((remote, msg))
        if len(remote) != len(dests):
            self._local.append(msg)

    def _broadcast(self, msg: Msg) -> None:
        self._send(self.cfg.members, msg)

    def _dispatch(self, msg: Msg) -> None:
        if isinstance(msg, RequestMsg):
            self._on_request(msg)
        elif isinstance(msg, MirPrePrepare):
            self._on_preprepare(msg)
        elif isinstance(msg, MirPrepare):
            self._on_prepare(msg)
        elif isinstance(msg, MirCommit):
            self._on_commit(msg)
        elif isinstance(msg, MirEpochChange):
            self._on_epoch_change(msg)
        else:
            self.metrics["drop:unknown"] += 1

    @property
    def epoch(self) -> int:
        return self.bmap.epoch

    # ------------------------------------------------------------ requests

    def _on_request(self, msg: RequestMsg) -> None:
        req = msg.req
        d = req.digest
        if d in self.committed_tx:
            self._reply(req)
            return
        if d not in self.requests:
            self.requests[d] = req
            self.seen_at[d] = self.now
            self._enqueue(d)
            for slot in sorted(self.deferred):
                pp = self.deferred.pop(slot)
                self._on_preprepare(pp)

    def _enqueue(self, d: Digest) -> None:
        if d not in self.committed_tx and d not in self.in_flight and assign_bucket(self.bmap, d) == self.id:
            self.queue[d] = None

    def _reply(self, req: Request) -> None:
        self._send((req.client_id,), Reply(self.id, self.cid, req.client_id, req.client_seq, req.digest))

    # ------------------------------------------------------------ instances

    def _maybe_propose(self) -> None:
        if self.own is not None or not self.queue or self.id not in self.bmap.leaders:
            return
        batch = list(self.queue)
        if self.max_block is not None:
            batch = batch[:self.max_block]
        batch.sort()
        for d in batch:
            del self.queue[d]
            self.in_flight.add(d)
        self.counter += 1
        self.own = (self.epoch, self.id, self.counter)
        self._out.notes.append(("propose", self.own, len(batch)))
        self._broadcast(MirPrePrepare(self.id, self.cid, self.epoch, self.id, self.counter, tuple(batch)))

    def _on_preprepare(self, msg: MirPrePrepare) -> None:
        slot = (msg.epoch, msg.leader, msg.counter)
        if msg.epoch > self.epoch:
            self._hold(msg)
            return
        if msg.sender != msg.leader or msg.epoch != self.epoch or msg.leader not in self.bmap.leaders:
            self.metrics["drop:stale"] += 1
            return
        if slot in self.preprepared:
            return
        for d in msg.batch:
            if assign_bucket(self.bmap, d) != msg.leader or d in self.committed_tx:
                self.metrics["drop:bad_batch"] += 1
                return
        if len(set(msg.batch)) != len(msg.batch) or not msg.batch:
            self.metrics["drop:bad_batch"] += 1
            return
        if any(d not in self.requests for d in msg.batch):
            self.deferred[slot] = msg
            return
        bd = mir_batch_digest(*slot, msg.batch)
        self.preprepared[slot] = bd
        inst = self.instances.get(slot)
        if inst is None or inst.digest != bd:
            # votes that arrived before the pre-prepare were for another batch
            inst = self.instances[slot] = Instance(msg.batch, bd)
        else:
            inst.batch = msg.batch
        for d in msg.batch:
            self.queue.pop(d, None)
            self.in_flight.add(d)
        self._broadcast(MirPrepare(self.id, self.cid, msg.epoch, msg.leader, msg.counter, bd))

    def _instance_for(self, msg) -> Optional[Instance]:
        slot = (msg.epoch, msg.leader, msg.counter)
        if msg.epoch > self.epoch:
            self._hold(msg)
            return None
        if msg.sender not in self.cfg or msg.epoch != self.epoch:
            self.metrics["drop:stale"] += 1
            return None
        inst = self.instances.get(slot)
        if inst is None:
            inst = self.instances[slot] = Instance((), msg.batch_digest)
        if inst.digest != msg.batch_digest:
            self.metrics["drop:mismatch"] += 1
            return None
        return inst

    def _on_prepare(self, msg: MirPrepare) -> None:
        inst = self._instance_for(msg)
        if inst is None:
            return
        inst.prepares.add(msg.sender)
        self._advance((msg.epoch, msg.leader, msg.counter), inst)

    def _on_commit(self, msg: MirCommit) -> None:
        inst = self._instance_for(msg)
        if inst is None:
            return
        inst.commits.add(msg.sender)
        self._advance((msg.epoch, msg.leader, msg.counter), inst)

    def _advance(self, slot: Slot, inst: Instance) -> None:
        if self.preprepared.get(slot) != inst.digest:
            return
        if not inst.sent_commit and len(inst.prepares) >= self.quorum:
            inst.sent_commit = True
            self._broadcast(MirCommit(self.id, self.cid, *slot, inst.digest))
        if inst.sent_commit and not inst.done and len(inst.commits) >= self.quorum:
            inst.done = True
            self._commit(slot, inst)

    def _commit(self, slot: Slot, inst: Instance) -> None:
        self.committed[slot] = inst.digest
        self.commit_times[slot] = self.now
        fresh = self._apply(inst)
        self._progress += 1
        self.failures = 0
        if self.timer is not None:
            self._out.timers.append(("cancel", self.timer))
            self.timer = None
        self._out.notes.append(("commit", slot, inst.digest, fresh))
        if slot == self.own:
            self.own = None

    def _apply(self, inst: Instance) -> int:
        fresh = 0
        for d in inst.batch:
            self.in_flight.discard(d)
            if d in self.committed_tx:
                continue
            fresh += 1
            self.committed_tx.add(d)
            self.seen_at.pop(d, None)
            self.queue.pop(d, None)
            self._reply(self.requests[d])
        return fresh

    # ------------------------------------------------------------ epochs

    def _pending(self) -> bool:
        return len(self.committed_tx) < len(self.requests)

    def _update_timer(self) -> None:
        if self._pending():
            if self.timer is None:
                self._tseq += 1
                self.timer = self._tseq
                self._out.timers.append(("set", self.timer, self.base_timeout << min(self.failures, 16)))
        elif self.timer is not None:
            self._out.timers.append(("cancel", self.timer))
            self.timer = None

    def _suspects(self) -> Tuple[ReplicaId, ...]:
        """Owners of requests that have waited longer than the base timeout."""
        cutoff = self.now - self.base_timeout
        owners = {assign_bucket(self.bmap, d) for d, t in self.seen_at.items()
                  if t <= cutoff and d not in self.committed_tx}
        return tuple(sorted(owners))

    def _on_timeout(self) -> None:
        self.failures += 1
        target = self.epoch + 1
        self.sent_change.add(target)
        self._out.notes.append(("epoch_change", target))
        self._broadcast(MirEpochChange(self.id, self.cid, target, self._suspects()))

    def _on_epoch_change(self, msg: MirEpochChange) -> None:
        if msg.sender not in self.cfg or msg.epoch <= self.epoch:
            return
        votes = self.changes.setdefault(msg.epoch, {})
        votes[msg.sender] = msg.suspects
        if len(votes) >= self.cfg.f + 1 and msg.epoch not in self.sent_change:
            self.sent_change.add(msg.epoch)
            self._broadcast(MirEpochChange(self.id, self.cid, msg.epoch, self._suspects()))
        if len(votes) >= self.quorum:
            self._enter_epoch(msg.epoch, votes)

    def _hold(self, msg: Msg) -> None:
        if len(self.future) < 4096:
            self.future.append(msg)
        else:
            self.metrics["drop:future"] += 1

    def _enter_epoch(self, epoch: int, votes: Dict[ReplicaId, Tuple[ReplicaId, ...]]) -> None:
        named = Counter(s for sus in votes.values() for s in set(sus))
        suspects = tuple(m for m in self.cfg.members if named[m] >= self.cfg.f + 1)
        self.bmap = BucketMap(epoch, self.cfg.members)
        self.own = None
        if self.timer is not None:
            self._out.timers.append(("cancel", self.timer))
            self.timer = None
        self.in_flight.clear()
        self.deferred.clear()
        self.queue.clear()
        for d in self.requests:
            self._enqueue(d)
        for e in [e for e in self.changes if e <= epoch]:
            del self.changes[e]
        self._out.notes.append(("epoch", epoch, suspects))
        held, self.future = self.future, []
        for m in held:
            if m.epoch >= epoch:
                self._local.append(m)
