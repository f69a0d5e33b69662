"""Pipelined replica: up to three blocks in flight, phases bundled per message.

The leader works in lockstep.  Whenever every in-flight block has collected the
quorum for its current phase, it emits one bundle that advances all of them:
a commit for blocks whose prepared phase finished, a prepared broadcast for
newly notarized blocks and, if the window allows, a prepare for a new block.
Replicas unbundle oldest phase first, so a block is appended before its
successor is checked against the head.
"""

from __future__ import annotations

from typing import List

from .messages import Commit, Msg, Prepare, Prepared, make_bundle
from .replica import Phase, Proposal, Replica


class PipelinedReplica(Replica):
    mode = "pipelined"
    depth = 3

    def _on_prepare_quorum(self, prop: Proposal) -> None:
        pass  # advanced by the next pump

    def _on_commit_quorum(self, prop: Proposal) -> None:
        pass

    def _maybe_propose(self) -> None:
        self.pump()

    def in_flight(self) -> List[Proposal]:
        return [self.proposals[p] for p in sorted(self.proposals) if self.proposals[p].phase is not Phase.DONE]

    def pump(self) -> None:
        live = self.in_flight()
        for p in live:
            if p.phase is Phase.PREPARING and p.nb is None:
                return
            if p.phase is Phase.PREPARED and p.commit_cert is None:
                return
        parts: List[Msg] = []
        waiting = 0
        for p in live:
            if p.phase is Phase.PREPARED:
                p.phase = Phase.DONE
                self._note("commit_sent", p.pos)
                parts.append(Commit(self.id, self.cid, p.pos, p.commit_cert, p.nb, p.block))
            else:
                p.phase = Phase.PREPARED
                waiting += 1
                self._note("prepared_sent", p.pos)
                parts.append(Prepared(self.id, self.cid, p.pos, p.nb, p.block))
        if waiting < self.depth:
            prep = self._next_prepare()
            if prep is not None:
                parts.append(prep)
        if not parts:
            return
        self._broadcast(parts[0] if len(parts) == 1 else make_bundle(parts))

    def _next_prepare(self):
        pos = self.expected_pos
        if pos in self.proposals or (self.vote_pos is not None and pos <= self.vote_pos):
            return None
        if not self._can_lead(pos):
            return None
        block = self._form(pos, self.head_digest)
        if block is None:
            return None
        self.proposals[pos] = Proposal(block)
        self._note("propose", pos, block.digest, len(block.txs))
        return Prepare(self.id, self.cid, pos, block.digest, block.prev, block)
