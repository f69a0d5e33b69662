from __future__ import annotations

from hypothesis import given, strategies as st

from bunchbft.core import Request, make_topology
from bunchbft.messages import MirEpochChange, MirPrePrepare, Reply, RequestMsg
from bunchbft.mir import BucketMap, MirReplica, assign_bucket, bucket_of

from helpers import Router


def mir(f=1, timeout=100, drop=None):
    cfg = make_topology(1, f, f + 1)[0]
    eng = {rid: MirReplica(rid, cfg, timeout=timeout) for rid in cfg.members}
    return cfg, eng, Router(eng, drop)


def send(r, members, req):
    for m in members:
        r.queue.append((req.client_id, m, RequestMsg(req.client_id, 0, req)))


def owned_by(bmap, leader, n, start=1):
    out, seq = [], start
    while len(out) < n:
        req = Request(100, seq, 0, b"")
        if assign_bucket(bmap, req.digest) == leader:
            out.append(req)
        seq += 1
    return out


@given(st.integers(1, 9), st.integers(0, 50))
def test_buckets_partition_the_digest_space(n, epoch):
    bmap = BucketMap(epoch, tuple(range(n)))
    ranges = sorted(r for rs in bmap.buckets.values() for r in rs)
    assert ranges[0][0] == 0 and ranges[-1][1] == 1 << 64
    assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
    assert all(len(rs) == 1 for rs in bmap.buckets.values())


@given(st.binary(min_size=32, max_size=32), st.integers(2, 9), st.integers(0, 50))
def test_bucket_lookup_agrees_with_ranges_and_rotates(digest, n, epoch):
    leaders = tuple(range(n))
    a, b = BucketMap(epoch, leaders), BucketMap(epoch + 1, leaders)
    owner = assign_bucket(a, digest)
    prefix = int.from_bytes(digest[:8], "big")
    assert any(lo <= prefix < hi for lo, hi in a.buckets[owner])
    assert assign_bucket(b, digest) == leaders[(leaders.index(owner) + 1) % n]
    assert 0 <= bucket_of(digest, n) < n


def test_single_leader_owns_everything():
    bmap = BucketMap(3, (7,))
    assert bmap.buckets == {7: [(0, 1 << 64)]}
    assert assign_bucket(bmap, b"\xff" * 32) == 7


def test_n4_commits_through_bucket_owner():
    cfg, eng, r = mir()
    req, = owned_by(eng[0].bmap, 2, 1)
    send(r, cfg.members, req)
    r.run()
    pps = r.of_type(MirPrePrepare)
    assert {s for s, _, _ in pps} == {2}
    for rep in eng.values():
        assert list(rep.committed) == [(0, 2, 1)] and req.digest in rep.committed_tx
    assert len(r.of_type(Reply)) == 4


def test_leader_crash_moves_bucket_in_next_epoch():
    cfg, eng, r = mir(drop=lambda s, d, m: s == 2 and not isinstance(m, RequestMsg))
    req, = owned_by(eng[0].bmap, 2, 1)
    send(r, [0, 1, 3], req)
    r.run()
    assert not any(req.digest in eng[i].committed_tx for i in (0, 1, 3))
    r.now = 150
    for i in (0, 1, 3):
        r.fire(i)
    r.run()
    for i in (0, 1, 3):
        assert eng[i].epoch == 1 and req.digest in eng[i].committed_tx
        assert set(eng[i].committed) == {(1, 3, 1)}
    changes = [m for s, _, m in r.of_type(MirEpochChange) if s != 2]
    assert changes and all(m.suspects == (2,) for m in changes)


def test_duplicate_request_commits_once():
    cfg, eng, r = mir()
    req, = owned_by(eng[0].bmap, 1, 1)
    send(r, cfg.members, req)
    r.run()
    send(r, cfg.members, req)
    r.run()
    assert len(eng[0].committed) == 1
    # the resubmission is answered straight from the committed set
    assert len([m for s, d, m in r.of_type(Reply) if s == 0]) == 2


def test_preprepare_outside_own_bucket_is_refused():
    cfg, eng, r = mir()
    req, = owned_by(eng[0].bmap, 1, 1)
    send(r, [0], req)
    r.run()
    r.deliver(0, MirPrePrepare(3, 0, 0, 3, 1, (req.digest,)))
    assert eng[0].metrics["drop:bad_batch"] == 1 and not eng[0].preprepared
