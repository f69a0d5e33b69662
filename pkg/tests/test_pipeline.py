from __future__ import annotations

from hypothesis import given, settings, strategies as st

from bunchbft.bench.config import BenchConfig
from bunchbft.bench.deploy import build
from bunchbft.core import RoundPos
from bunchbft.messages import Bundle, Commit, Prepare, Prepared
from bunchbft.pipeline import PipelinedReplica
from bunchbft.replica import Replica

from helpers import Router, cluster, submit


def leader_broadcasts(router, leader=0, to=1):
    out = []
    for s, d, m in router.sent:
        if s == leader and d == to and isinstance(m, (Bundle, Prepare, Prepared, Commit)):
            parts = m.parts if isinstance(m, Bundle) else (m,)
            out.append([(type(p), p.pos) for p in parts])
    return out


def run_cluster(cls, n_req, max_block=1, leaders=None):
    topo, keys, eng = cluster(1, 2, cls=cls, max_block=max_block)
    r = Router(eng)
    for s in range(1, n_req + 1):
        submit(r, topo[0].members, seq=s, leader=(leaders or [0])[s % len(leaders or [0])])
    r.run()
    return r, eng


def test_startup_is_prepare_only():
    r, eng = run_cluster(PipelinedReplica, 5)
    first = leader_broadcasts(r)[0]
    assert first == [(Prepare, RoundPos(0, 0))]


def test_steady_state_bundles_three_phases():
    r, eng = run_cluster(PipelinedReplica, 5)
    kinds = [[k for k, _ in b] for b in leader_broadcasts(r)]
    assert [Commit, Prepared, Prepare] in kinds
    third = leader_broadcasts(r)[2]
    assert third == [(Commit, RoundPos(0, 0)), (Prepared, RoundPos(0, 1)), (Prepare, RoundPos(1, 0))]


def test_prepare_deferred_when_no_block_can_form():
    r, eng = run_cluster(PipelinedReplica, 3)
    tail = leader_broadcasts(r)[-2:]
    assert [[k for k, _ in b] for b in tail] == [[Commit, Prepared], [Commit]]
    assert len(eng[3].committed) == 3


def test_pipelined_matches_basic_on_scripted_load():
    r1, basic = run_cluster(Replica, 5)
    r2, piped = run_cluster(PipelinedReplica, 5)
    for i in basic:
        assert basic[i].committed == piped[i].committed


def _check_window(bcasts):
    stage = {}
    for b in bcasts:
        assert len(b) <= 3
        for kind, pos in b:
            prev = stage.get(pos)
            if kind is Prepare:
                assert prev is None
            elif kind is Prepared:
                assert prev is Prepare
            else:
                assert prev is Prepared
            stage[pos] = kind
        live = [p for p, k in stage.items() if k is not Commit]
        assert len(live) <= 3


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 4), st.lists(st.integers(0, 3), min_size=1, max_size=4))
def test_window_and_phase_order(n_req, max_block, leaders):
    r, eng = run_cluster(PipelinedReplica, n_req, max_block, leaders)
    for leader in eng:
        _check_window(leader_broadcasts(r, leader, (leader + 1) % 4))
    committed = [set(e.committed.items()) for e in eng.values()]
    assert all(c == committed[0] for c in committed)
    assert sum(len(eng[0].blocks[nb.block_digest].txs) for nb in eng[0].committed.values()) == n_req


def test_pipelined_faster_than_basic_in_sim():
    def last_commit(proto):
        cfg = BenchConfig(protocol=proto, clients=4, interval=10**6, preload=10, duration=10, drain=2000,
                          max_block=4, delta=5, seed=3, trace="notes")
        dep = build(cfg)
        dep.run()
        r = dep.replicas[0]
        return r.commit_times, {p: nb.block_digest for p, nb in r.committed.items()}
    tb, cb = last_commit("bunchbft-basic")
    tp, cp = last_commit("bunchbft-pipelined")
    assert cb == cp
    assert max(tp.values()) < max(tb.values())
