"""Basic BunchBFT replica state machine.

A replica is driven one event at a time through :meth:`Replica.on_event`,
which returns the messages to send and the timers to set or cancel.  Nothing
else leaves the object, so replaying an event sequence reproduces the same
outputs.

Position handling, in short:

* every block is proposed at a (round, sub-round) position and chained to the
  previous notarized block by digest;
* an honest replica votes for at most one block per position, and only for a
  block that extends its own log head;
* committing a notarized block also commits its uncommitted ancestors;
* the leader of round ``r`` is the member with the most client votes among
  the blocks of round ``r - 1`` on the chain (lowest id on ties and when there
  are none);
* on timeout a replica sends a sub-round change to the next-ranked candidate,
  which takes over once it holds ``n - f`` of them and proves it with those
  signed messages.
"""

from __future__ import annotations

import enum
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, NamedTuple, Optional, Set, Tuple

from .core import (GENESIS, ORIGIN, Block, ClusterConfig, NotarizedBlock, ReplicaId, RoundPos, Topology,
                   next_pos, pos_index, quorum_size)
from .crypto import AggSig, CryptoError, Digest, KeyRing, PartialSig, aggregate
from .ledger import (Admit, Exhausted, NotReady, RequestPool, Status, VoteTally, admit_request,
                     form_block, next_leader, ranking)
from .messages import (Bundle, Commit, GlobalCommit, GlobalPrepared, GlobalRoundChange, GlobalVote,
                       MalformedFrame, Msg, Prepare, Prepared, PreparedVote, PrepareVote, Reply,
                       RequestCopy, RequestMsg, SubRoundChange, change_digest, split)


class MsgArrived(NamedTuple):
    msg: Msg


class TimerFired(NamedTuple):
    timer_id: int


class Tick(NamedTuple):
    pass


@dataclass
class EngineOutput:
    sends: List[Tuple[Tuple[int, ...], Msg]] = field(default_factory=list)
    timers: List[tuple] = field(default_factory=list)
    notes: List[tuple] = field(default_factory=list)

    @property
    def broadcasts(self):
        return [(d, m) for d, m in self.sends if len(d) > 1]

    @property
    def unicasts(self):
        return [(d[0], m) for d, m in self.sends if len(d) == 1 and not isinstance(m, Reply)]

    @property
    def client_replies(self):
        return [m for _, m in self.sends if isinstance(m, Reply)]

    def messages(self, kind=None):
        return [m for _, m in self.sends if kind is None or isinstance(m, kind)]


class Phase(enum.Enum):
    IDLE = "idle"
    PREPARING = "preparing"
    PREPARED = "prepared"
    DONE = "done"


@dataclass
class Proposal:
    """Leader-side record of one block in flight."""

    block: Block
    votes: Dict[ReplicaId, PartialSig] = field(default_factory=dict)
    nb: Optional[NotarizedBlock] = None
    commit_votes: Dict[ReplicaId, PartialSig] = field(default_factory=dict)
    commit_cert: Optional[AggSig] = None
    phase: Phase = Phase.PREPARING

    @property
    def pos(self) -> RoundPos:
        return self.block.pos

    @property
    def hb(self) -> Digest:
        return self.block.digest


class Replica:
    mode = "basic"

    def __init__(self, rid: ReplicaId, topo: Topology, keys: KeyRing, *, timeout: int = 100,
                 max_block: Optional[int] = None, cross_cluster: bool = False,
                 global_timeout: Optional[int] = None) -> None:
        self.id = rid
        self.topo = topo
        self.cfg: ClusterConfig = topo.config_of(rid)
        self.cid = self.cfg.cluster_id
        self.keys = keys
        self.quorum = quorum_size(self.cfg)
        self.base_timeout = timeout
        self.max_block = max_block

        self.pool = RequestPool(self.cfg, rid)
        self.tally = VoteTally()
        self.log: List[NotarizedBlock] = []
        self.blocks: Dict[Digest, Block] = {}
        self.index_of: Dict[Digest, int] = {}
        self.in_chain: Set[Digest] = set()
        self.committed: Dict[RoundPos, NotarizedBlock] = {}
        self.commit_times: Dict[RoundPos, int] = {}
        self.commit_height = 0
        self.round_nbs: Dict[int, List[NotarizedBlock]] = {}
        self.rounds_done = -1

        self.vote_pos: Optional[RoundPos] = None
        self.prepared_voted: Set[Digest] = set()
        self.floor: RoundPos = ORIGIN
        self.overrides: Dict[int, Tuple[RoundPos, ReplicaId]] = {}
        self.excluded: Dict[int, Set[ReplicaId]] = {}
        self.proposals: Dict[RoundPos, Proposal] = {}
        self.deferred: Optional[Prepare] = None
        self.buffered: Dict[RoundPos, Commit] = {}
        self.changes: Dict[ReplicaId, SubRoundChange] = {}
        self.last_takeover: Optional[RoundPos] = None
        self.final: Set[Digest] = set()

        self.failures = 0
        self.ptimer: Optional[int] = None
        self._timer_seq = 0
        self._timer_kind: Dict[int, tuple] = {}

        self.metrics: Counter = Counter()
        self.now = 0
        self._out = EngineOutput()
        self._local: Deque[Msg] = deque()
        self._commit_sender: ReplicaId = rid
        self.reply_on_commit = not cross_cluster
        self.xc = None
        if cross_cluster:
            from .cross import CrossCluster
            self.xc = CrossCluster(self, timeout=global_timeout or 2 * timeout)

    # ------------------------------------------------------------ plumbing

    @property
    def head(self) -> Optional[NotarizedBlock]:
        return self.log[-1] if self.log else None

    @property
    def head_digest(self) -> Digest:
        return self.log[-1].block_digest if self.log else GENESIS

    @property
    def expected_pos(self) -> RoundPos:
        return next_pos(self.log[-1].pos, self.cfg) if self.log else ORIGIN

    @property
    def last_committed(self) -> Optional[NotarizedBlock]:
        return self.log[self.commit_height - 1] if self.commit_height else None

    def on_event(self, now: int, event) -> EngineOutput:
        self.now = now
        self._out = out = EngineOutput()
        if isinstance(event, MsgArrived):
            self._dispatch(event.msg)
        elif isinstance(event, TimerFired):
            self._on_timer(event.timer_id)
        while True:
            while self._local:
                self._dispatch(self._local.popleft())
            self._step()
            if not self._local:
                break
        self._update_timer()
        return out

    def _send(self, dests, msg: Msg) -> None:
        remote = tuple(d for d in dests if d != self.id)
        if remote:
            self._out.sends.append((remote, msg))
        if len(remote) != len(dests):
            self._local.append(msg)

    def _broadcast(self, msg: Msg) -> None:
        self._send(self.cfg.members, msg)

    def _note(self, *rec) -> None:
        self._out.notes.append(rec)

    def _drop(self, reason: str) -> None:
        self.metrics["drop:" + reason] += 1

    def _set_timer(self, kind: tuple, delay: int) -> int:
        self._timer_seq += 1
        tid = self._timer_seq
        self._timer_kind[tid] = kind
        self._out.timers.append(("set", tid, delay))
        return tid

    def _cancel_timer(self, tid: Optional[int]) -> None:
        if tid is not None and self._timer_kind.pop(tid, None) is not None:
            self._out.timers.append(("cancel", tid))

    def _dispatch(self, msg: Msg) -> None:
        handler = _HANDLERS.get(type(msg))
        if handler is None:
            self._drop("unknown")
            return
        handler(self, msg)

    def _on_bundle(self, msg: Bundle) -> None:
        try:
            parts = split(msg)
        except MalformedFrame:
            self._drop("malformed")
            return
        if any(p.sender != msg.sender for p in parts):
            self._drop("malformed")
            return
        for p in parts:
            self._dispatch(p)

    def _on_cross(self, msg: Msg) -> None:
        if self.xc is None:
            self._drop("unknown")
        else:
            self.xc.handle(msg)

    def _valid_cert(self, agg: AggSig, over: Digest, cfg: Optional[ClusterConfig] = None) -> bool:
        cfg = cfg or self.cfg
        if agg.over != over or not set(agg.signers) <= set(cfg.members):
            return False
        try:
            return self.keys.verify_agg(agg, quorum_size(cfg))
        except CryptoError:
            return False

    def _valid_partial(self, p: PartialSig, sender: ReplicaId, over: Digest) -> bool:
        return p.signer == sender and p.over == over and sender in self.cfg and self.keys.verify(p)

    # ------------------------------------------------------------ requests

    def _on_request(self, msg: RequestMsg) -> None:
        res = admit_request(self.pool, msg.req, msg.sender, from_client=True)
        if res.outcome is Admit.REJECT:
            self._drop("invalid_request")
        elif res.outcome is Admit.REPLY:
            if res.entry.req.digest in self.final:
                self._reply(res.entry.req)
        elif res.outcome is Admit.REBROADCAST:
            self._send([m for m in self.cfg.members if m != self.id],
                       RequestCopy(self.id, self.cid, msg.req, res.reqn))
            self._recheck_deferred()

    def _on_copy(self, msg: RequestCopy) -> None:
        res = admit_request(self.pool, msg.req, msg.sender, from_client=False, reqn=msg.reqn)
        if res.outcome is Admit.REJECT:
            self._drop("invalid_request")
            return
        self._recheck_deferred()

    def _reply(self, req) -> None:
        self._send((req.client_id,), Reply(self.id, self.cid, req.client_id, req.client_seq, req.digest))

    # ------------------------------------------------------------ election

    def round_tally(self, rnd: int) -> VoteTally:
        """Client votes carried by this replica's chain blocks of round ``rnd - 1``."""
        t = VoteTally()
        if rnd <= 0:
            return t
        for nb in reversed(self.log):
            r = nb.pos.round
            if r < rnd - 1:
                break
            if r == rnd - 1:
                for e in self.blocks[nb.block_digest].txs:
                    t.add(e.leader)
        return t

    def leader_for(self, pos: RoundPos) -> ReplicaId:
        ov = self.overrides.get(pos.round)
        if ov is not None and pos >= ov[0]:
            return ov[1]
        return ranking(self.round_tally(pos.round), self.cfg)[0]

    # ------------------------------------------------------------ chain

    def _append(self, nb: NotarizedBlock, block: Block) -> None:
        self.log.append(nb)
        self.blocks[nb.block_digest] = block
        self.index_of[nb.block_digest] = len(self.log) - 1
        for t in block.txs:
            self.in_chain.add(t.digest)
            self.pool.set_status(t.digest, Status.IN_BLOCK)
        self._note("append", nb.pos, nb.block_digest)
        if self.buffered:
            for pos in sorted(self.buffered):
                c = self.buffered[pos]
                if c.block.prev == nb.block_digest:
                    del self.buffered[pos]
                    self._local.append(c)
                    break

    def _valid_nb(self, nb: Optional[NotarizedBlock], block: Optional[Block]) -> bool:
        return (nb is not None and block is not None and block.digest == nb.block_digest
                and block.pos == nb.pos and self._valid_cert(nb.cert, nb.block_digest))

    def _try_append(self, nb: Optional[NotarizedBlock], block: Optional[Block]) -> bool:
        """Append a notarized block if it directly extends the head."""
        if nb is None or nb.block_digest in self.index_of:
            return nb is not None
        if not self._valid_nb(nb, block):
            return False
        head = self.head
        if block.prev != self.head_digest or (head is not None and nb.pos <= head.pos):
            return False
        self._append(nb, block)
        return True

    def _commit_through(self, idx: int) -> None:
        for i in range(self.commit_height, idx + 1):
            nb = self.log[i]
            block = self.blocks[nb.block_digest]
            self.committed[nb.pos] = nb
            self.commit_times[nb.pos] = self.now
            self.round_nbs.setdefault(nb.pos.round, []).append(nb)
            for t in block.txs:
                e = self.pool.get(t.digest)
                if e is None or e.status is Status.COMMITTED:
                    continue
                self.pool.set_status(t.digest, Status.COMMITTED)
                if self.reply_on_commit:
                    self.final.add(t.digest)
                    self._reply(e.req)
            self._note("commit", nb.pos, nb.block_digest, len(block.txs))
            self.proposals.pop(nb.pos, None)
        self.commit_height = idx + 1
        self.failures = 0
        self._cancel_timer(self.ptimer)
        self.ptimer = None
        if self.xc is not None:
            top = self.log[idx].pos
            done = top.round if top.sub_round == self.cfg.k - 1 else top.round - 1
            for r in range(self.rounds_done + 1, done + 1):
                batch = tuple(self.round_nbs.get(r, ()))
                if batch:
                    self.xc.on_local_round_complete(r, batch, self._commit_sender)
            self.rounds_done = max(self.rounds_done, done)

    # ------------------------------------------------------------ prepare

    def _check_txs(self, block: Block) -> str:
        need = self.cfg.f + 1
        wait = False
        seen = set()
        for t in block.txs:
            if t.digest in seen or t.digest in self.in_chain:
                return "bad"
            seen.add(t.digest)
            e = self.pool.get(t.digest)
            if e is None or len(e.copies) < need:
                wait = True
                continue
            if e.req.preferred_leader != t.leader or e.status is Status.COMMITTED:
                return "bad"
        return "wait" if wait else "ok"

    def _valid_takeover(self, msg: Prepare) -> bool:
        seen = set()
        best: Optional[NotarizedBlock] = None
        for ch in msg.changes:
            if ch.sender not in self.cfg or ch.sender in seen or ch.target != msg.sender:
                return False
            if not self._valid_partial(ch.partial, ch.sender, change_digest(ch.new_pos, ch.target, ch.h_nb)):
                return False
            seen.add(ch.sender)
            if ch.head is not None and self._valid_nb(ch.head, ch.head_block) and ch.h_nb == ch.head.block_digest:
                if best is None or ch.head.pos > best.pos:
                    best = ch.head
        if len(seen) < self.quorum:
            return False
        if msg.pos != max(ch.new_pos for ch in msg.changes):
            return False
        want = GENESIS if best is None else best.block_digest
        return msg.h_nb == want

    def on_prepare(self, msg: Prepare) -> None:
        b = msg.block
        if msg.sender not in self.cfg:
            self._drop("foreign")
            return
        if b.digest != msg.hb or b.pos != msg.pos or b.prev != msg.h_nb or b.proposer != msg.sender:
            self._drop("malformed")
            return
        takeover = bool(msg.changes)
        if takeover and not self._valid_takeover(msg):
            self._drop("bad_takeover")
            return
        if self.vote_pos is not None and msg.pos <= self.vote_pos:
            self._drop("stale")
            return
        if not takeover and msg.pos < self.floor:
            self._drop("stale")
            return
        if msg.h_nb != self.head_digest and msg.justify is not None:
            self._try_append(msg.justify, msg.justify_block)
        if msg.h_nb != self.head_digest:
            self._drop("hnb_mismatch")
            return
        head = self.head
        if takeover:
            if head is not None and msg.pos <= head.pos:
                self._drop("stale")
                return
        else:
            if msg.pos != self.expected_pos:
                self._drop("bad_pos")
                return
            if self.leader_for(msg.pos) != msg.sender:
                self._drop("not_leader")
                return
        if msg.sender != self.id:
            verdict = self._check_txs(b)
            if verdict == "bad":
                self._drop("bad_txs")
                return
            if verdict == "wait":
                self.deferred = msg
                return
        if takeover:
            self._adopt_takeover(msg.pos, msg.sender)
        self.deferred = None
        self.vote_pos = msg.pos
        self._send((msg.sender,), PrepareVote(self.id, self.cid, msg.pos, self.keys.sign(self.id, msg.hb)))

    def _recheck_deferred(self) -> None:
        if self.deferred is not None:
            msg, self.deferred = self.deferred, None
            self.on_prepare(msg)

    def _adopt_takeover(self, pos: RoundPos, leader: ReplicaId) -> None:
        cur = self.overrides.get(pos.round)
        if cur is None or pos >= cur[0]:
            self.overrides[pos.round] = (pos, leader)
        if pos > self.floor:
            self.floor = pos
        if leader != self.id:
            self._drain()

    def _drain(self) -> None:
        """Abandon this replica's own in-flight proposals that never notarized."""
        for pos, prop in list(self.proposals.items()):
            if prop.hb not in self.index_of:
                self.pool.release(prop.block.tx_digests)
            del self.proposals[pos]

    def on_prepare_vote(self, msg: PrepareVote) -> None:
        prop = self.proposals.get(msg.pos)
        if prop is None or prop.nb is not None:
            self._drop("late_vote")
            return
        if not self._valid_partial(msg.partial, msg.sender, prop.hb):
            self._drop("bad_vote")
            return
        prop.votes[msg.sender] = msg.partial
        if len(prop.votes) >= self.quorum:
            prop.nb = NotarizedBlock(prop.hb, aggregate(prop.votes.values()), prop.pos)
            self._note("prepare_quorum", prop.pos)
            self._try_append(prop.nb, prop.block)
            self._on_prepare_quorum(prop)

    def _on_prepare_quorum(self, prop: Proposal) -> None:
        prop.phase = Phase.PREPARED
        self._note("prepared_sent", prop.pos)
        self._broadcast(Prepared(self.id, self.cid, prop.pos, prop.nb, prop.block))

    # ------------------------------------------------------------ prepared

    def on_prepared(self, msg: Prepared) -> None:
        nb, b = msg.nb, msg.block
        if msg.sender not in self.cfg:
            self._drop("foreign")
            return
        if nb.pos != msg.pos or not self._valid_nb(nb, b):
            self._drop("bad_cert")
            return
        if nb.block_digest not in self.index_of:
            if msg.pos < self.floor:
                self._drop("stale")
                return
            if not self._try_append(nb, b):
                self._drop("not_extending")
                return
        if nb.block_digest in self.prepared_voted:
            return
        self.prepared_voted.add(nb.block_digest)
        self._send((msg.sender,), PreparedVote(self.id, self.cid, msg.pos, self.keys.sign(self.id, nb.digest)))
        self._recheck_deferred()

    def on_prepared_vote(self, msg: PreparedVote) -> None:
        prop = self.proposals.get(msg.pos)
        if prop is None or prop.nb is None or prop.commit_cert is not None:
            self._drop("late_vote")
            return
        if not self._valid_partial(msg.partial, msg.sender, prop.nb.digest):
            self._drop("bad_vote")
            return
        prop.commit_votes[msg.sender] = msg.partial
        if len(prop.commit_votes) >= self.quorum:
            prop.commit_cert = aggregate(prop.commit_votes.values())
            self._note("prepared_quorum", prop.pos)
            self._on_commit_quorum(prop)

    def _on_commit_quorum(self, prop: Proposal) -> None:
        prop.phase = Phase.DONE
        self._note("commit_sent", prop.pos)
        self._broadcast(Commit(self.id, self.cid, prop.pos, prop.commit_cert, prop.nb, prop.block))

    # ------------------------------------------------------------ commit

    def on_commit(self, msg: Commit) -> None:
        nb, b = msg.nb, msg.block
        if msg.sender not in self.cfg:
            self._drop("foreign")
            return
        if nb.pos != msg.pos or not self._valid_cert(msg.cert, nb.digest) or not self._valid_nb(nb, b):
            self._drop("bad_cert")
            return
        have = self.committed.get(nb.pos)
        if have is not None:
            if have.block_digest != nb.block_digest:
                self.metrics["conflicting_commit"] += 1
            return
        idx = self.index_of.get(nb.block_digest)
        if idx is None:
            head = self.head
            if head is not None and nb.pos <= head.pos:
                self._drop("stale")
                return
            if b.prev == self.head_digest:
                self._append(nb, b)
                idx = len(self.log) - 1
            else:
                ahead = pos_index(nb.pos, self.cfg) - pos_index(self.expected_pos, self.cfg)
                if ahead < self.cfg.k and len(self.buffered) < self.cfg.k:
                    self.buffered[nb.pos] = msg
                else:
                    self._drop("too_far_ahead")
                return
        if idx < self.commit_height:
            return
        self._commit_sender = msg.sender
        self._commit_through(idx)
        self._recheck_deferred()

    # ------------------------------------------------------------ proposing

    def _step(self) -> None:
        self._maybe_propose()

    def _can_lead(self, pos: RoundPos) -> bool:
        if pos < self.floor or self.leader_for(pos) != self.id:
            return False
        ov = self.overrides.get(pos.round)
        if ov is not None and ov[1] == self.id and pos >= ov[0]:
            # named successor by its own timeout: lead only after a certified takeover
            return self.last_takeover is not None and self.last_takeover >= ov[0]
        return True

    def _form(self, pos: RoundPos, prev: Digest) -> Optional[Block]:
        try:
            return form_block(self.pool, self.tally, self.cfg, pos, prev, self.id, self.max_block)
        except NotReady:
            # a cross-cluster round only ships once all K blocks exist, so close it
            if self.xc is not None and pos.sub_round > 0:
                return Block((), self.id, pos, prev)
            return None

    def _maybe_propose(self) -> None:
        if self.proposals or self.commit_height != len(self.log):
            return
        pos = self.expected_pos
        if (self.vote_pos is not None and pos <= self.vote_pos) or not self._can_lead(pos):
            return
        block = self._form(pos, self.head_digest)
        if block is None:
            return
        self.proposals[pos] = Proposal(block)
        self._note("propose", pos, block.digest, len(block.txs))
        self._broadcast(Prepare(self.id, self.cid, pos, block.digest, block.prev, block))

    # ------------------------------------------------------------ failures

    def _waiting(self) -> bool:
        return (self.pool.has_eligible() or self.commit_height < len(self.log)
                or self.deferred is not None or bool(self.proposals))

    def _update_timer(self) -> None:
        if self._waiting():
            if self.ptimer is None:
                self.ptimer = self._set_timer(("progress",), self.base_timeout << min(self.failures, 16))
        elif self.ptimer is not None:
            self._cancel_timer(self.ptimer)
            self.ptimer = None

    def _on_timer(self, tid: int) -> None:
        kind = self._timer_kind.pop(tid, None)
        if kind is None:
            return
        if kind[0] == "progress":
            if tid == self.ptimer:
                self.ptimer = None
                self.on_timeout()
        elif self.xc is not None:
            self.xc.on_timer(kind)

    def on_timeout(self) -> None:
        """No commit within the timer: ask the next candidate to take over."""
        self.failures += 1
        ref = self.head.pos if self.head else None
        if self.vote_pos is not None and (ref is None or self.vote_pos > ref):
            ref = self.vote_pos
        new_pos = ORIGIN if ref is None else next_pos(ref, self.cfg)
        if new_pos < self.floor:
            new_pos = self.floor
        failed = self.leader_for(new_pos)
        excluded = self.excluded.setdefault(new_pos.round, set())
        excluded.add(failed)
        tally = self.round_tally(new_pos.round)
        try:
            target = next_leader(tally, excluded, self.cfg)
        except Exhausted:
            excluded.clear()
            excluded.add(failed)
            target = next_leader(tally, excluded, self.cfg)
        self.floor = new_pos
        self.overrides[new_pos.round] = (new_pos, target)
        self._drain()
        self._note("timeout", new_pos, failed, target)
        self._send((target,), self._make_change(new_pos, target))

    def _make_change(self, new_pos: RoundPos, target: ReplicaId) -> SubRoundChange:
        h = self.head_digest
        head = self.head
        return SubRoundChange(self.id, self.cid, new_pos, target, h, head,
                              self.blocks[h] if head is not None else None,
                              self.keys.sign(self.id, change_digest(new_pos, target, h)))

    def on_subround_change(self, msg: SubRoundChange) -> None:
        if msg.target != self.id or msg.sender not in self.cfg:
            self._drop("misrouted")
            return
        if not self._valid_partial(msg.partial, msg.sender, change_digest(msg.new_pos, msg.target, msg.h_nb)):
            self._drop("bad_change")
            return
        if msg.head is None:
            if msg.h_nb != GENESIS:
                self._drop("bad_change")
                return
        elif msg.h_nb != msg.head.block_digest or not self._valid_nb(msg.head, msg.head_block):
            self._drop("bad_change")
            return
        if self.last_takeover is not None and msg.new_pos <= self.last_takeover:
            self._drop("stale")
            return
        prev = self.changes.get(msg.sender)
        if prev is None or msg.new_pos >= prev.new_pos:
            self.changes[msg.sender] = msg
        if len(self.changes) >= self.quorum:
            self._take_over()

    def _take_over(self) -> None:
        changes = [c for s, c in sorted(self.changes.items()) if s != self.id]
        best: Optional[SubRoundChange] = None
        for c in changes:
            if c.head is not None and (best is None or c.head.pos > best.head.pos):
                best = c
        if best is not None and best.head.block_digest not in self.index_of:
            if not self._try_append(best.head, best.head_block):
                self.metrics["takeover_gap"] += 1
                return
        ref = self.head.pos if self.head else None
        if self.vote_pos is not None and (ref is None or self.vote_pos > ref):
            ref = self.vote_pos
        mine_pos = ORIGIN if ref is None else next_pos(ref, self.cfg)
        q = max([c.new_pos for c in changes] + [mine_pos])
        own = self._make_change(q if mine_pos < q else mine_pos, self.id)
        cert = tuple(changes) + (own,)
        q = max(c.new_pos for c in cert)
        self.changes.clear()
        self.last_takeover = q
        self._adopt_takeover(q, self.id)
        self._drain()
        h = self.head_digest
        block = self._form(q, h) or Block((), self.id, q, h)
        head = self.head
        self.proposals[q] = Proposal(block)
        self._note("takeover", q, block.digest, len(block.txs))
        self._broadcast(Prepare(self.id, self.cid, q, block.digest, h, block,
                                head, self.blocks[h] if head is not None else None, cert))


_HANDLERS = {
    RequestMsg: Replica._on_request,
    RequestCopy: Replica._on_copy,
    Prepare: Replica.on_prepare,
    PrepareVote: Replica.on_prepare_vote,
    Prepared: Replica.on_prepared,
    PreparedVote: Replica.on_prepared_vote,
    Commit: Replica.on_commit,
    SubRoundChange: Replica.on_subround_change,
    Bundle: Replica._on_bundle,
    GlobalPrepared: Replica._on_cross,
    GlobalVote: Replica._on_cross,
    GlobalCommit: Replica._on_cross,
    GlobalRoundChange: Replica._on_cross,
}
