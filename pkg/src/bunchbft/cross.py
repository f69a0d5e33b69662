"""Cross-cluster commit for BunchBFT-X.

Once a cluster finishes a round locally, the replica that drove the last local
commit ships the round's notarized blocks (digests and certificates only) to
the replica with the same index in every other cluster.  That relay has its
own cluster re-check the certificates and sign the batch digest, then sends
the aggregated signature back out to the same-index peers.  A replica holding
one such certificate from every cluster other than the origin marks the round
globally committed and tells its own cluster, which is when the origin's
members answer clients.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Set, Tuple

from .core import NotarizedBlock, ReplicaId
from .crypto import AggSig, Digest, PartialSig, aggregate
from .ledger import Exhausted, VoteTally, next_leader
from .messages import (GlobalCommit, GlobalPrepared, GlobalRoundChange, GlobalVote, batch_digest,
                       global_change_digest)

if TYPE_CHECKING:
    from .replica import Replica


class GlobalPhase(enum.Enum):
    AWAIT_LOCAL = "await_local"
    PREPARING = "global_preparing"
    COMMITTING = "global_committing"
    COMMITTED = "globally_committed"


@dataclass
class GlobalRoundState:
    """Origin-side view of one of this cluster's rounds."""

    round: int
    local_batch: Tuple[NotarizedBlock, ...] = ()
    digest: Optional[Digest] = None
    driver: Optional[ReplicaId] = None
    received_prepared: Dict[int, Digest] = field(default_factory=dict)
    received_commits: Dict[int, AggSig] = field(default_factory=dict)
    phase: GlobalPhase = GlobalPhase.AWAIT_LOCAL
    timer: Optional[int] = None
    failures: int = 0
    excluded: Set[ReplicaId] = field(default_factory=set)
    changes: Dict[ReplicaId, GlobalRoundChange] = field(default_factory=dict)


@dataclass
class RelayState:
    batch: Tuple[NotarizedBlock, ...]
    digest: Digest
    votes: Dict[ReplicaId, PartialSig] = field(default_factory=dict)
    sigma: Optional[AggSig] = None
    requesters: List[ReplicaId] = field(default_factory=list)


class CrossCluster:
    def __init__(self, replica: "Replica", timeout: int) -> None:
        self.r = replica
        self.timeout = timeout
        self.rounds: Dict[int, GlobalRoundState] = {}
        self.relays: Dict[Tuple[int, int], RelayState] = {}
        self.voted: Dict[Tuple[int, int], Digest] = {}
        self.certs: Dict[Tuple[int, int], Dict[int, Tuple[Digest, AggSig]]] = {}
        self.committed: Dict[Tuple[int, int], Digest] = {}

    # ------------------------------------------------------------ helpers

    @property
    def index(self) -> int:
        return self.r.cfg.index_of(self.r.id)

    def _peers(self, exclude=()) -> List[ReplicaId]:
        topo = self.r.topo
        return [topo.peer(c, self.index) for c in sorted(topo.clusters)
                if c != self.r.cid and c not in exclude]

    def _state(self, rnd: int) -> GlobalRoundState:
        st = self.rounds.get(rnd)
        if st is None:
            st = self.rounds[rnd] = GlobalRoundState(rnd)
        return st

    def _valid_batch(self, origin: int, rnd: int, batch) -> bool:
        cfg = self.r.topo.clusters.get(origin)
        if cfg is None or not batch:
            return False
        last = None
        for nb in batch:
            if nb.pos.round != rnd or (last is not None and nb.pos <= last):
                return False
            if not self.r._valid_cert(nb.cert, nb.block_digest, cfg):
                return False
            last = nb.pos
        return True

    def _valid_agg(self, agg: AggSig, over: Digest, cid: int) -> bool:
        cfg = self.r.topo.clusters.get(cid)
        return cfg is not None and self.r._valid_cert(agg, over, cfg)

    def _arm(self, st: GlobalRoundState) -> None:
        self.r._cancel_timer(st.timer)
        st.timer = self.r._set_timer(("global", st.round), self.timeout << min(st.failures, 16))

    # ------------------------------------------------------------ origin side

    def on_local_round_complete(self, rnd: int, batch: Tuple[NotarizedBlock, ...], driver: ReplicaId) -> None:
        st = self._state(rnd)
        if st.local_batch:
            return
        st.local_batch = batch
        st.digest = batch_digest(self.r.cid, rnd, batch)
        st.driver = driver
        self.r._note("local_round", rnd, st.digest)
        key = (self.r.cid, rnd)
        if key in self.committed:
            self._finish(st)
            return
        st.phase = GlobalPhase.PREPARING
        if len(self.r.topo) == 1:
            self._mark(self.r.cid, rnd, st.digest)
            return
        if driver == self.r.id:
            self._drive(st)
        self._arm(st)
        self._try_collect(self.r.cid, rnd)

    def _drive(self, st: GlobalRoundState, fallback: bool = False) -> None:
        msg = GlobalPrepared(self.r.id, self.r.cid, self.r.cid, st.round, st.local_batch)
        if fallback:
            confirmed = set(st.received_commits)
            dests = [m for c in sorted(self.r.topo.clusters) if c != self.r.cid and c not in confirmed
                     for m in self.r.topo[c].members]
        else:
            dests = self._peers()
        self.r._note("global_prepared_sent", st.round, len(dests))
        if dests:
            self.r._send(dests, msg)

    def _finish(self, st: GlobalRoundState) -> None:
        if st.phase is GlobalPhase.COMMITTED:
            return
        st.phase = GlobalPhase.COMMITTED
        self.r._cancel_timer(st.timer)
        st.timer = None
        for nb in st.local_batch:
            for t in self.r.blocks[nb.block_digest].txs:
                e = self.r.pool.get(t.digest)
                if e is None or t.digest in self.r.final:
                    continue
                self.r.final.add(t.digest)
                self.r._reply(e.req)

    def on_timer(self, kind: tuple) -> None:
        rnd = kind[1]
        st = self.rounds.get(rnd)
        if st is None or st.phase is GlobalPhase.COMMITTED:
            return
        st.timer = None
        st.failures += 1
        self.r._note("global_timeout", rnd, st.driver)
        if st.driver == self.r.id:
            self._drive(st, fallback=True)
        else:
            failed = st.driver
            st.excluded.add(failed)
            tally = self._round_tally(rnd)
            try:
                target = next_leader(tally, st.excluded, self.r.cfg)
            except Exhausted:
                st.excluded = {failed}
                target = next_leader(tally, st.excluded, self.r.cfg)
            st.driver = target
            part = self.r.keys.sign(self.r.id, global_change_digest(self.r.cid, rnd, target))
            self.r._send((target,), GlobalRoundChange(self.r.id, self.r.cid, self.r.cid, rnd, target, part))
        self._arm(st)

    def _round_tally(self, rnd: int) -> VoteTally:
        st = self.rounds.get(rnd)
        blocks = [self.r.blocks[nb.block_digest] for nb in (st.local_batch if st else ())]
        return VoteTally.from_blocks(blocks)

    def _on_change(self, msg: GlobalRoundChange) -> None:
        r = self.r
        if msg.sender not in r.cfg or msg.origin != r.cid or msg.target != r.id:
            r._drop("misrouted")
            return
        if not r._valid_partial(msg.partial, msg.sender, global_change_digest(msg.origin, msg.round, msg.target)):
            r._drop("bad_change")
            return
        st = self._state(msg.round)
        if st.phase is GlobalPhase.COMMITTED:
            r._drop("stale")
            return
        st.changes[msg.sender] = msg
        if len(st.changes) >= r.quorum and st.local_batch and st.driver != r.id:
            st.changes.clear()
            st.driver = r.id
            r._note("global_takeover", msg.round)
            self._drive(st)
            self._arm(st)

    # ------------------------------------------------------------ relay side

    def handle(self, msg) -> None:
        if isinstance(msg, GlobalPrepared):
            self._on_prepared(msg)
        elif isinstance(msg, GlobalVote):
            self._on_vote(msg)
        elif isinstance(msg, GlobalCommit):
            self._on_commit(msg)
        elif isinstance(msg, GlobalRoundChange):
            self._on_change(msg)

    def _on_prepared(self, msg: GlobalPrepared) -> None:
        r = self.r
        src = r.topo.cluster_of.get(msg.sender)
        key = (msg.origin, msg.round)
        if src is None or msg.origin == r.cid or msg.cluster != src:
            r._drop("misrouted")
            return
        if src == msg.origin:
            # request from the origin cluster: act as relay
            relay = self.relays.get(key)
            if relay is not None:
                if relay.sigma is not None:
                    r._send((msg.sender,), self._single_commit(key, relay))
                elif msg.sender not in relay.requesters:
                    relay.requesters.append(msg.sender)
                return
            if not self._valid_batch(msg.origin, msg.round, msg.batch):
                r._drop("bad_batch")
                return
            d = batch_digest(msg.origin, msg.round, msg.batch)
            self.relays[key] = RelayState(msg.batch, d, requesters=[msg.sender])
            r._broadcast(GlobalPrepared(r.id, r.cid, msg.origin, msg.round, msg.batch))
        elif src == r.cid:
            # local re-validation requested by our relay
            if not self._valid_batch(msg.origin, msg.round, msg.batch):
                r._drop("bad_batch")
                return
            d = batch_digest(msg.origin, msg.round, msg.batch)
            prev = self.voted.setdefault(key, d)
            if prev != d:
                r._drop("conflicting_batch")
                return
            r._send((msg.sender,), GlobalVote(r.id, r.cid, msg.origin, msg.round, r.keys.sign(r.id, d)))
        else:
            r._drop("misrouted")

    def _on_vote(self, msg: GlobalVote) -> None:
        r = self.r
        relay = self.relays.get((msg.origin, msg.round))
        if relay is None or relay.sigma is not None:
            r._drop("late_vote")
            return
        if not r._valid_partial(msg.partial, msg.sender, relay.digest):
            r._drop("bad_vote")
            return
        relay.votes[msg.sender] = msg.partial
        if len(relay.votes) < r.quorum:
            return
        relay.sigma = aggregate(relay.votes.values())
        key = (msg.origin, msg.round)
        out = self._single_commit(key, relay)
        dests = self._peers()
        dests += [q for q in relay.requesters if q not in dests]
        r._note("global_confirm", msg.origin, msg.round)
        r._send(dests, out)
        self._record(key, r.cid, relay.digest, relay.sigma)

    def _single_commit(self, key, relay: RelayState) -> GlobalCommit:
        return GlobalCommit(self.r.id, self.r.cid, key[0], key[1], relay.digest, ((self.r.cid, relay.sigma),))

    def _on_commit(self, msg: GlobalCommit) -> None:
        r = self.r
        src = r.topo.cluster_of.get(msg.sender)
        key = (msg.origin, msg.round)
        if src is None or msg.cluster != src:
            r._drop("misrouted")
            return
        if key in self.committed:
            r._drop("stale")
            return
        if src != r.cid:
            if len(msg.certs) != 1 or msg.certs[0][0] != src or src == msg.origin:
                r._drop("malformed")
                return
            if not self._valid_agg(msg.certs[0][1], msg.batch_digest, src):
                r._drop("bad_cert")
                return
            self._record(key, src, msg.batch_digest, msg.certs[0][1])
            return
        # final notice from a collector in our own cluster
        need = {c for c in r.topo.clusters if c != msg.origin}
        got = {c for c, _ in msg.certs}
        if got != need or len(msg.certs) != len(need):
            r._drop("malformed")
            return
        for c, agg in msg.certs:
            if not self._valid_agg(agg, msg.batch_digest, c):
                r._drop("bad_cert")
                return
        if msg.origin == r.cid:
            st = self.rounds.get(msg.round)
            if st is not None and st.digest is not None and st.digest != msg.batch_digest:
                r._drop("batch_mismatch")
                return
        self._mark(msg.origin, msg.round, msg.batch_digest)

    def _record(self, key, cid: int, digest: Digest, agg: AggSig) -> None:
        per = self.certs.setdefault(key, {})
        if cid in per and per[cid][0] != digest:
            self.r.metrics["conflicting_global_cert"] += 1
            return
        per[cid] = (digest, agg)
        if key[0] == self.r.cid:
            st = self._state(key[1])
            st.received_commits[cid] = agg
            if st.phase is GlobalPhase.PREPARING:
                st.phase = GlobalPhase.COMMITTING
        self._try_collect(*key)

    def _try_collect(self, origin: int, rnd: int) -> None:
        key = (origin, rnd)
        if key in self.committed:
            return
        per = self.certs.get(key, {})
        need = [c for c in sorted(self.r.topo.clusters) if c != origin]
        if not need or any(c not in per for c in need):
            return
        digests = {per[c][0] for c in need}
        if len(digests) != 1:
            self.r.metrics["conflicting_global_cert"] += 1
            return
        d = digests.pop()
        if origin == self.r.cid:
            st = self.rounds.get(rnd)
            if st is not None and st.digest is not None and st.digest != d:
                self.r._drop("batch_mismatch")
                return
        certs = tuple((c, per[c][1]) for c in need)
        self._mark(origin, rnd, d)
        others = [m for m in self.r.cfg.members if m != self.r.id]
        if others:
            self.r._send(others, GlobalCommit(self.r.id, self.r.cid, origin, rnd, d, certs))

    def _mark(self, origin: int, rnd: int, digest: Digest) -> None:
        key = (origin, rnd)
        if key in self.committed:
            return
        self.committed[key] = digest
        self.r._note("gcommit", origin, rnd, digest)
        if origin == self.r.cid:
            st = self._state(rnd)
            if st.local_batch:
                self._finish(st)
