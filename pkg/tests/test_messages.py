from __future__ import annotations

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from bunchbft.core import GENESIS, Block, NotarizedBlock, RoundPos
from bunchbft.crypto import KeyRing, aggregate, hash_bytes
from bunchbft.messages import (Bundle, Commit, GlobalPrepared, MalformedFrame, Prepare, Prepared, Reply, decode,
                               encode, make_bundle, render, split, wire_size)

from strategies import message


def _nb(pos):
    ring = KeyRing(range(4))
    b = Block((), 0, pos, GENESIS)
    return NotarizedBlock(b.digest, aggregate([ring.sign(i, b.digest) for i in range(3)]), pos), b


def test_prepare_roundtrip():
    b = Block((), 0, RoundPos(0, 0), GENESIS)
    m = Prepare(0, 0, RoundPos(0, 0), b.digest, GENESIS, b)
    assert decode(encode(m)) == m


def test_global_prepared_k3_roundtrip():
    batch = tuple(_nb(RoundPos(2, s))[0] for s in range(3))
    m = GlobalPrepared(4, 1, 1, 2, batch)
    assert decode(encode(m)) == m


def test_decode_empty_and_garbage():
    with pytest.raises(MalformedFrame):
        decode(b"")
    with pytest.raises(MalformedFrame):
        decode(b"\xff")
    good = encode(Reply(1, 0, 9, 3, hash_bytes(b"r")))
    with pytest.raises(MalformedFrame):
        decode(good[:-1])
    with pytest.raises(MalformedFrame):
        decode(good + b"\x00")


@settings(max_examples=10_000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(message)
def test_codec_roundtrip(m):
    data = encode(m)
    assert decode(data) == m
    assert encode(decode(data)) == data


@settings(max_examples=300, deadline=None)
@given(message, st.integers(0, 10_000))
def test_truncation_is_detected(m, cut):
    data = encode(m)
    cut = cut % len(data)
    with pytest.raises(MalformedFrame):
        decode(data[:cut])


def test_bundle_orders_oldest_phase_first():
    nb0, b0 = _nb(RoundPos(0, 0))
    nb1, b1 = _nb(RoundPos(0, 1))
    b2 = Block((), 0, RoundPos(1, 0), nb1.block_digest)
    parts = [Prepare(0, 0, b2.pos, b2.digest, b2.prev, b2), Prepared(0, 0, nb1.pos, nb1, b1),
             Commit(0, 0, nb0.pos, nb0.cert, nb0, b0)]
    bundle = make_bundle(parts)
    assert [type(p) for p in split(bundle)] == [Commit, Prepared, Prepare]
    assert bundle.sender == 0
    with pytest.raises(MalformedFrame):
        split(Bundle(()))


def test_wire_size_counts_payload_and_render():
    from bunchbft.core import Request
    from bunchbft.messages import RequestMsg

    small = RequestMsg(9, 0, Request(9, 1, 0, b"", 0))
    big = RequestMsg(9, 0, Request(9, 1, 0, b"", 1000))
    assert wire_size(big) - wire_size(small) == 1000 + (len(encode(big)) - len(encode(small)))
    assert render(small).startswith("RequestMsg(")
