from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from bunchbft.core import make_topology
from bunchbft.messages import Reply
from bunchbft.replica import EngineOutput, MsgArrived, Tick
from bunchbft.simnet import (Crash, Deadlock, DelayLink, Fixed, FaultPlan, LatencyModel, Mute, Network,
                             PlanExceedsF, Trace, Uniform)


class Echo:
    """Node 0 sends ``count`` pings to each peer on start; peers answer every ping."""

    def __init__(self, nid, peers, count=1):
        self.id = nid
        self.peers = tuple(peers)
        self.count = count
        self.got = []

    def on_event(self, now, event):
        out = EngineOutput()
        if isinstance(event, Tick) and self.id == 0:
            for i in range(self.count):
                out.sends.append((self.peers, Reply(0, 0, 0, i, bytes(32))))
        elif isinstance(event, MsgArrived):
            m = event.msg
            self.got.append((now, m.sender, m.client_seq))
            if self.id != 0:
                out.sends.append(((0,), Reply(self.id, 0, 0, m.client_seq, bytes(32))))
                out.notes.append(("echo", m.client_seq))
        return out


def network(n=4, latency=None, seed=0, count=1, **kw):
    net = Network(latency or LatencyModel(Uniform(1, 20), Uniform(1, 20)), seed, **kw)
    engines = {i: Echo(i, [p for p in range(n) if p != i], count) for i in range(n)}
    for i, e in engines.items():
        net.add(i, e)
    return net, engines


def test_fixed_latency_delivers_exactly_delta_later():
    net, eng = network(latency=LatencyModel(Fixed(7), Fixed(7)))
    net.run()
    assert [t for t, _, _ in eng[1].got] == [7]
    assert sorted(t for t, _, _ in eng[0].got) == [14, 14, 14]


def test_same_seed_same_trace_different_seed_differs():
    a, _ = network(seed=3, count=5)
    b, _ = network(seed=3, count=5)
    c, _ = network(seed=4, count=5)
    assert a.run().digest() == b.run().digest()
    assert c.run().digest() != a.trace.digest()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_replay_is_bit_identical(seed):
    a, _ = network(seed=seed, count=3)
    b, _ = network(seed=seed, count=3)
    assert list(a.run().lines()) == list(b.run().lines())


def test_link_rng_is_independent_of_other_traffic():
    quiet, q = network(seed=9, count=1)
    busy, b = network(seed=9, count=1)
    # extra traffic on the 0->2 and 0->3 links must not move delays on 0->1
    busy.engines[0].peers = (1, 2, 3, 2, 3, 2, 3)
    quiet.run()
    busy.run()
    assert q[1].got == b[1].got
    rng = random.Random("link|9|0|1")
    assert q[1].got[0][0] == rng.randint(1, 20)


def test_crashed_node_neither_sends_nor_receives():
    net, eng = network(latency=LatencyModel(Fixed(5), Fixed(5)))
    net.inject(FaultPlan({2: [Crash(0)]}))
    net.run()
    assert eng[2].got == []
    assert sorted(s for _, s, _ in eng[0].got) == [1, 3]
    assert net.honest == [0, 1, 3]


def test_mute_window_silences_sender():
    net, eng = network(latency=LatencyModel(Fixed(5), Fixed(5)))
    net.inject(FaultPlan({1: [Mute(0, 6)]}))
    net.run()
    assert 1 not in {s for _, s, _ in eng[0].got}


def test_delay_link_adds_ticks():
    net, eng = network(latency=LatencyModel(Fixed(5), Fixed(5)))
    net.inject(FaultPlan(links=[DelayLink((0, 3), 40)]))
    net.run()
    assert eng[3].got[0][0] == 45 and eng[1].got[0][0] == 5


def test_pre_gst_traffic_can_drop_or_stall():
    lat = LatencyModel(Fixed(5), Fixed(5), gst=10**6, pre_gst_drop=0.5)
    net, eng = network(n=2, latency=lat, count=200)
    net.run()
    assert 0 < net.dropped < 200
    assert max(t for t, _, _ in eng[1].got) > 5
    assert all(5 <= t <= 55 for t, _, _ in eng[1].got)


def test_forged_sender_is_discarded():
    net, eng = network(latency=LatencyModel(Fixed(5), Fixed(5)))
    net.submit(2, [1], Reply(3, 0, 0, 99, bytes(32)), 0)
    net.run()
    assert 99 not in [s for _, _, s in eng[1].got]
    assert [r for r in net.trace.records if r[1] == "forged"]


def test_predicate_that_never_holds_raises_deadlock():
    net, _ = network()
    with pytest.raises(Deadlock) as e:
        net.run(predicate=lambda n: False)
    assert "events=" in e.value.dump


def test_plan_exceeding_f_is_rejected():
    topo = make_topology(1, 1, 2)
    with pytest.raises(PlanExceedsF):
        FaultPlan({0: [Crash(0)], 1: [Crash(0)]}).validate(topo)
    FaultPlan({0: [Crash(0)], 1: [Crash(0)]}, allow_overflow=True).validate(topo)


def test_processing_cost_serializes_inbox():
    net, eng = network(latency=LatencyModel(Fixed(5), Fixed(5)), proc_cost=3)
    net.run()
    # three echoes land at 0 together and are handled 3 ticks apart
    assert sorted(t for t, _, _ in eng[0].got) == [13, 16, 19]


def test_trace_write_and_notes(tmp_path):
    net, _ = network(latency=LatencyModel(Fixed(5), Fixed(5)))
    net.run()
    path = tmp_path / "trace.log"
    net.trace.write(path)
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert len(rows) == len(net.trace)
    assert {"time", "kind", "node", "tag", "bytes"} <= set(rows[0])
    assert [(n, d) for _, n, d in net.trace.notes("echo")] == [(1, (0,)), (2, (0,)), (3, (0,))]
    with pytest.raises(ValueError):
        Trace("loud")
