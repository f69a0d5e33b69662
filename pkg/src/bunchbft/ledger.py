"""Request pool, client-vote tallies, block formation and leader election."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .core import (NO_REQN, Block, ClusterConfig, ReplicaId, Request, RoundPos, TxEntry,
                   copies_threshold)
from .crypto import Digest


class NotReady(Exception):
    """No transaction has enough witnessed copies to form a block."""


class Exhausted(Exception):
    """Every member has been excluded as a leader candidate."""


class Status(enum.IntEnum):
    PENDING = 0
    IN_BLOCK = 1
    COMMITTED = 2


class Admit(enum.Enum):
    REJECT = "reject"
    REPLY = "reply"            # already committed: answer the client again
    REBROADCAST = "rebroadcast"
    RECORDED = "recorded"      # copy noted, nothing to send


@dataclass
class PoolEntry:
    req: Request
    copies: Set[ReplicaId] = field(default_factory=set)
    reqn: int = NO_REQN
    status: Status = Status.PENDING

    @property
    def key(self):
        return TxEntry(self.req.digest, self.req.preferred_leader, self.reqn).sort_key()


@dataclass
class AdmitResult:
    outcome: Admit
    entry: Optional[PoolEntry] = None
    reqn: int = NO_REQN


class RequestPool:
    """Per-replica view of client requests (the client table lives here too)."""

    def __init__(self, cfg: ClusterConfig, owner: ReplicaId) -> None:
        self.cfg = cfg
        self.owner = owner
        self.entries: Dict[Digest, PoolEntry] = {}
        self.by_client: Dict[Tuple[int, int], Digest] = {}
        self.reqn = 0
        self.threshold = copies_threshold(cfg)
        # digests with enough copies and still pending, in arrival order
        self._eligible: Dict[Digest, None] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, d: Digest) -> Optional[PoolEntry]:
        return self.entries.get(d)

    def valid(self, req: Request) -> bool:
        return (req.preferred_leader in self.cfg.members and req.client_seq >= 1
                and req.payload_size >= 0 and req.client_id >= 0)

    def _entry(self, req: Request) -> PoolEntry:
        d = req.digest
        e = self.entries.get(d)
        if e is None:
            e = PoolEntry(req)
            self.entries[d] = e
            self.by_client.setdefault((req.client_id, req.client_seq), d)
        return e

    def _note_copy(self, e: PoolEntry, rid: ReplicaId) -> None:
        if rid in e.copies:
            return
        e.copies.add(rid)
        if e.status is Status.PENDING and len(e.copies) >= self.threshold:
            self._eligible[e.req.digest] = None

    def committed_seq(self, req: Request) -> bool:
        d = self.by_client.get((req.client_id, req.client_seq))
        return d is not None and self.entries[d].status is Status.COMMITTED

    def eligible(self) -> List[PoolEntry]:
        return [self.entries[d] for d in self._eligible]

    def has_eligible(self) -> bool:
        return bool(self._eligible)

    def set_status(self, d: Digest, status: Status) -> None:
        e = self.entries.get(d)
        if e is None or status <= e.status:
            return
        e.status = status
        self._eligible.pop(d, None)

    def release(self, digests: Iterable[Digest]) -> None:
        """Return in-block transactions of an abandoned proposal to pending."""
        for d in digests:
            e = self.entries.get(d)
            if e is not None and e.status is Status.IN_BLOCK:
                e.status = Status.PENDING
                if len(e.copies) >= self.threshold:
                    self._eligible[d] = None


def admit_request(pool: RequestPool, req: Request, sender: ReplicaId, *, from_client: bool,
                  reqn: int = NO_REQN) -> AdmitResult:
    """Record a request seen from a client or a copy rebroadcast by a replica.

    A request straight from its client counts as the receiving replica's own
    copy; the receiver is told to rebroadcast it, with a fresh sequence number
    when it is the request's preferred leader.
    """
    if not pool.valid(req):
        return AdmitResult(Admit.REJECT)
    if pool.committed_seq(req):
        return AdmitResult(Admit.REPLY, pool.entries[pool.by_client[(req.client_id, req.client_seq)]])
    e = pool._entry(req)
    if not from_client:
        if sender not in pool.cfg.members:
            return AdmitResult(Admit.REJECT)
        if reqn != NO_REQN and sender == req.preferred_leader and e.reqn == NO_REQN:
            e.reqn = reqn
        pool._note_copy(e, sender)
        return AdmitResult(Admit.RECORDED, e)
    first = pool.owner not in e.copies
    if not first and e.status is not Status.PENDING:
        return AdmitResult(Admit.RECORDED, e)
    if first and pool.owner == req.preferred_leader and e.reqn == NO_REQN:
        pool.reqn += 1
        e.reqn = pool.reqn
    pool._note_copy(e, pool.owner)
    return AdmitResult(Admit.REBROADCAST, e, e.reqn if pool.owner == req.preferred_leader else NO_REQN)


class VoteTally:
    """Client leader votes carried by a set of transactions."""

    def __init__(self, counts: Optional[Dict[ReplicaId, int]] = None) -> None:
        self.counts: Counter = Counter(counts or {})

    def add(self, leader: ReplicaId, n: int = 1) -> None:
        self.counts[leader] += n

    @classmethod
    def from_entries(cls, entries: Iterable[TxEntry]) -> "VoteTally":
        t = cls()
        for e in entries:
            t.add(e.leader)
        return t

    @classmethod
    def from_blocks(cls, blocks: Iterable[Block]) -> "VoteTally":
        t = cls()
        for b in blocks:
            for e in b.txs:
                t.add(e.leader)
        return t

    def total(self) -> int:
        return sum(self.counts.values())

    def __bool__(self) -> bool:
        return bool(self.counts)

    def __repr__(self) -> str:
        return f"VoteTally({dict(sorted(self.counts.items()))})"


def form_block(pool: RequestPool, tally: VoteTally, cfg: ClusterConfig, pos: RoundPos, h_nb: Digest,
               proposer: ReplicaId, max_txs: Optional[int] = None) -> Block:
    """Bundle every pending transaction with at least f+1 copies.

    Transactions are ordered by (preferred leader, leader sequence number,
    digest) and marked in-block; their votes are added to ``tally``.
    """
    ready = [e for e in pool.eligible() if e.status is Status.PENDING and len(e.copies) >= cfg.f + 1]
    if not ready:
        raise NotReady(pos)
    ready.sort(key=lambda e: e.key)
    if max_txs is not None:
        ready = ready[:max_txs]
    txs = []
    for e in ready:
        txs.append(TxEntry(e.req.digest, e.req.preferred_leader, e.reqn))
        tally.add(e.req.preferred_leader)
        pool.set_status(e.req.digest, Status.IN_BLOCK)
    return Block(tuple(txs), proposer, pos, h_nb)


def ranking(tally: VoteTally, cfg: ClusterConfig) -> List[ReplicaId]:
    """Members by descending votes, ties and vote-less members by lowest id."""
    return sorted(cfg.members, key=lambda m: (-tally.counts.get(m, 0), m))


def elect_leader(tally: VoteTally, cfg: ClusterConfig) -> ReplicaId:
    return ranking(tally, cfg)[0]


def next_leader(tally: VoteTally, excluded: Iterable[ReplicaId], cfg: ClusterConfig) -> ReplicaId:
    ex = set(excluded)
    for m in ranking(tally, cfg):
        if m not in ex:
            return m
    raise Exhausted(sorted(ex))
