from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings, strategies as st

from bunchbft.core import GENESIS, NO_REQN, ClusterConfig, Request, RoundPos
from bunchbft.ledger import (Admit, Exhausted, NotReady, RequestPool, Status, VoteTally, admit_request,
                             elect_leader, form_block, next_leader, ranking)

CFG = ClusterConfig(0, (0, 1, 2, 3), 1, 2)


def req(client=10, seq=1, leader=0, op=b""):
    return Request(client, seq, leader, op)


def test_fresh_tx_at_preferred_leader_gets_reqn_one():
    pool = RequestPool(CFG, 2)
    res = admit_request(pool, req(leader=2), 10, from_client=True)
    assert res.outcome is Admit.REBROADCAST and res.reqn == 1
    res = admit_request(pool, req(seq=2, leader=2), 10, from_client=True)
    assert res.reqn == 2


def test_non_leader_rebroadcasts_without_sequence():
    pool = RequestPool(CFG, 1)
    res = admit_request(pool, req(leader=2), 10, from_client=True)
    assert res.outcome is Admit.REBROADCAST and res.reqn == NO_REQN


def test_committed_seq_yields_reply():
    pool = RequestPool(CFG, 1)
    r = req()
    admit_request(pool, r, 10, from_client=True)
    pool.set_status(r.digest, Status.COMMITTED)
    assert admit_request(pool, r, 10, from_client=True).outcome is Admit.REPLY


def test_invalid_tx_rejected():
    pool = RequestPool(CFG, 1)
    assert admit_request(pool, req(leader=99), 10, from_client=True).outcome is Admit.REJECT
    assert admit_request(pool, req(seq=0), 10, from_client=True).outcome is Admit.REJECT
    # copies from non-members are not counted
    assert admit_request(pool, req(), 42, from_client=False).outcome is Admit.REJECT


def _pool_with(copies):
    """copies: list of (request, witnesses)."""
    pool = RequestPool(CFG, 0)
    for r, who in copies:
        for w in who:
            if w == 0:
                admit_request(pool, r, r.client_id, from_client=True)
            else:
                admit_request(pool, r, w, from_client=False)
    return pool


def test_form_block_threshold():
    a, b = req(seq=1), req(seq=2)
    pool = _pool_with([(a, [0, 1]), (b, [0])])
    blk = form_block(pool, VoteTally(), CFG, RoundPos(0, 0), GENESIS, 0)
    assert blk.tx_digests == (a.digest,)
    assert pool.get(a.digest).status is Status.IN_BLOCK
    with pytest.raises(NotReady):
        form_block(_pool_with([(b, [0])]), VoteTally(), CFG, RoundPos(0, 0), GENESIS, 0)


def test_form_block_orders_by_leader_id():
    t3, t1 = req(seq=1, leader=3), req(seq=2, leader=1)
    pool = _pool_with([(t3, [0, 2]), (t1, [0, 2])])
    blk = form_block(pool, VoteTally(), CFG, RoundPos(0, 0), GENESIS, 0)
    assert blk.tx_digests == (t1.digest, t3.digest)


def _oracle_key(e):
    # lowest (leader, reqn-or-infinity, digest) first
    reqn = e.reqn if e.reqn else float("inf")
    return (e.req.preferred_leader, reqn, e.req.digest)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.sets(st.integers(0, 3), min_size=1)), min_size=1, max_size=8))
def test_form_block_matches_bruteforce_oracle(plan):
    reqs = [(req(client=10 + i, leader=l), sorted(w)) for i, (l, w) in enumerate(plan)]
    pool = _pool_with(reqs)
    eligible = [pool.get(r.digest) for r, w in reqs if len(w) >= 2]
    if not eligible:
        with pytest.raises(NotReady):
            form_block(pool, VoteTally(), CFG, RoundPos(0, 0), GENESIS, 0)
        return
    # oracle: the unique permutation whose keys are non-decreasing
    want = None
    for perm in itertools.permutations(eligible) if len(eligible) <= 6 else [sorted(eligible, key=_oracle_key)]:
        keys = [_oracle_key(e) for e in perm]
        if all(a <= b for a, b in zip(keys, keys[1:])):
            want = tuple(e.req.digest for e in perm)
            break
    tally = VoteTally()
    blk = form_block(pool, tally, CFG, RoundPos(0, 0), GENESIS, 0)
    assert blk.tx_digests == want
    # tally recount equals the number of included votes
    assert tally.total() == len(blk.txs)
    assert tally.counts == VoteTally.from_entries(blk.txs).counts


def test_elect_leader_examples():
    assert elect_leader(VoteTally({0: 3, 1: 1}), CFG) == 0
    assert elect_leader(VoteTally({1: 2, 2: 2}), CFG) == 1
    odd = ClusterConfig(0, (5, 2, 9, 7), 1, 2)
    assert elect_leader(VoteTally(), odd) == 2


def test_next_leader_examples():
    t = VoteTally({0: 3, 1: 2, 2: 1})
    assert next_leader(t, {0}, CFG) == 1
    assert next_leader(VoteTally({0: 3, 1: 2}), set(), CFG) == 0
    with pytest.raises(Exhausted):
        next_leader(t, set(CFG.members), CFG)


@given(st.dictionaries(st.integers(0, 3), st.integers(0, 9)), st.sets(st.integers(0, 3), max_size=3))
def test_election_is_pure_and_consistent(counts, excluded):
    t = VoteTally(counts)
    assert elect_leader(t, CFG) == elect_leader(VoteTally(dict(counts)), CFG) == next_leader(t, set(), CFG)
    rank = ranking(t, CFG)
    assert sorted(rank) == list(CFG.members)
    assert next_leader(t, excluded, CFG) == [m for m in rank if m not in excluded][0]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["client", "copy", "block", "commit", "release"]),
                          st.integers(0, 3), st.integers(0, 3)), max_size=40))
def test_pool_monotonicity(ops):
    pool = RequestPool(CFG, 0)
    reqs = [req(client=20 + i, leader=i) for i in range(4)]
    history = {}
    for op, i, w in ops:
        r = reqs[i]
        if op == "client":
            admit_request(pool, r, r.client_id, from_client=True)
        elif op == "copy":
            admit_request(pool, r, w, from_client=False)
        elif op == "block":
            pool.set_status(r.digest, Status.IN_BLOCK)
        elif op == "commit":
            pool.set_status(r.digest, Status.COMMITTED)
        else:
            pool.release([r.digest])
        for d, e in pool.entries.items():
            before = history.get(d)
            if before is not None:
                assert before[0] <= e.copies
                # only an abandoned in-block tx may step back to pending
                assert before[1] <= e.status or (op == "release" and before[1] is Status.IN_BLOCK)
            history[d] = (set(e.copies), e.status)
        assert all(pool.get(x.req.digest).status is Status.PENDING for x in pool.eligible())
