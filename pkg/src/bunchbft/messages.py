"""Protocol messages and their binary wire format.

Frame layout: one tag byte, then the fields in declaration order.  Integers are
fixed-width little-endian, digests are raw 32 bytes, variable byte strings and
sequences carry a u32 length prefix, optional values a u8 presence flag.  A
bundle is its tag, a count byte and the concatenated part frames.

Request payloads are virtual: only ``payload_size`` travels, and
:func:`wire_size` adds it back when accounting bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from functools import cached_property
from typing import Callable, Dict, List, Optional, Tuple

from .core import Block, NotarizedBlock, Request, RoundPos, TxEntry
from .crypto import AggSig, Digest, PartialSig, hash_bytes


class MalformedFrame(ValueError):
    pass


class Msg:
    """Base for every message: ``sender`` and ``cluster`` are always present."""

    TAG = 0

    @cached_property
    def wire_size(self) -> int:
        return wire_size(self)


@dataclass(frozen=True, eq=True)
class RequestMsg(Msg):
    sender: int
    cluster: int
    req: Request


@dataclass(frozen=True)
class RequestCopy(Msg):
    sender: int
    cluster: int
    req: Request
    reqn: int


@dataclass(frozen=True)
class Prepare(Msg):
    sender: int
    cluster: int
    pos: RoundPos
    hb: Digest
    h_nb: Digest
    block: Block
    justify: Optional[NotarizedBlock] = None
    justify_block: Optional[Block] = None
    changes: Tuple["SubRoundChange", ...] = ()


@dataclass(frozen=True)
class PrepareVote(Msg):
    sender: int
    cluster: int
    pos: RoundPos
    partial: PartialSig


@dataclass(frozen=True)
class Prepared(Msg):
    sender: int
    cluster: int
    pos: RoundPos
    nb: NotarizedBlock
    block: Block


@dataclass(frozen=True)
class PreparedVote(Msg):
    sender: int
    cluster: int
    pos: RoundPos
    partial: PartialSig


@dataclass(frozen=True)
class Commit(Msg):
    sender: int
    cluster: int
    pos: RoundPos
    cert: AggSig
    nb: NotarizedBlock
    block: Block


@dataclass(frozen=True)
class SubRoundChange(Msg):
    sender: int
    cluster: int
    new_pos: RoundPos
    target: int
    h_nb: Digest
    head: Optional[NotarizedBlock]
    head_block: Optional[Block]
    partial: PartialSig


@dataclass(frozen=True)
class GlobalPrepared(Msg):
    sender: int
    cluster: int
    origin: int
    round: int
    batch: Tuple[NotarizedBlock, ...]


@dataclass(frozen=True)
class GlobalVote(Msg):
    sender: int
    cluster: int
    origin: int
    round: int
    partial: PartialSig


@dataclass(frozen=True)
class GlobalCommit(Msg):
    sender: int
    cluster: int
    origin: int
    round: int
    batch_digest: Digest
    certs: Tuple[Tuple[int, AggSig], ...]


@dataclass(frozen=True)
class GlobalRoundChange(Msg):
    sender: int
    cluster: int
    origin: int
    round: int
    target: int
    partial: PartialSig


@dataclass(frozen=True)
class Reply(Msg):
    sender: int
    cluster: int
    client_id: int
    client_seq: int
    digest: Digest


@dataclass(frozen=True)
class Bundle(Msg):
    parts: Tuple[Msg, ...]

    @property
    def sender(self) -> int:
        return self.parts[0].sender

    @property
    def cluster(self) -> int:
        return self.parts[0].cluster


@dataclass(frozen=True)
class MirPrePrepare(Msg):
    sender: int
    cluster: int
    epoch: int
    leader: int
    counter: int
    batch: Tuple[Digest, ...]


@dataclass(frozen=True)
class MirPrepare(Msg):
    sender: int
    cluster: int
    epoch: int
    leader: int
    counter: int
    batch_digest: Digest


@dataclass(frozen=True)
class MirCommit(Msg):
    sender: int
    cluster: int
    epoch: int
    leader: int
    counter: int
    batch_digest: Digest


@dataclass(frozen=True)
class MirEpochChange(Msg):
    sender: int
    cluster: int
    epoch: int
    suspects: Tuple[int, ...]


def change_digest(new_pos: RoundPos, target: int, h_nb: Digest) -> Digest:
    return hash_bytes(b"SRC" + struct.pack("<III", new_pos.round, new_pos.sub_round, target) + h_nb)


def global_change_digest(origin: int, rnd: int, target: int) -> Digest:
    return hash_bytes(b"GRC" + struct.pack("<III", origin, rnd, target))


def batch_digest(origin: int, rnd: int, batch) -> Digest:
    return hash_bytes(b"GB" + struct.pack("<II", origin, rnd) + b"".join(nb.block_digest for nb in batch))


def mir_batch_digest(epoch: int, leader: int, counter: int, batch) -> Digest:
    return hash_bytes(b"MB" + struct.pack("<IIQ", epoch, leader, counter) + b"".join(batch))


# --- codec ---------------------------------------------------------------

class _Reader:
    __slots__ = ("data", "off")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        end = self.off + n
        if end > len(self.data):
            raise MalformedFrame("truncated frame")
        out = self.data[self.off:end]
        self.off = end
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


Enc = Callable[[List[bytes], object], None]
Dec = Callable[[_Reader], object]


def _int(fmt: str) -> Tuple[Enc, Dec]:
    st = struct.Struct("<" + fmt)

    def enc(out, v):
        try:
            out.append(st.pack(v))
        except struct.error as e:
            raise MalformedFrame(str(e)) from None

    return enc, lambda r: r.unpack(st)[0]


U8, U16, U32, U64 = _int("B"), _int("H"), _int("I"), _int("Q")


def _fixed(n: int) -> Tuple[Enc, Dec]:
    def enc(out, v):
        if len(v) != n:
            raise MalformedFrame(f"expected {n} bytes")
        out.append(v)

    return enc, lambda r: r.take(n)


DIGEST = _fixed(32)


def _var_bytes() -> Tuple[Enc, Dec]:
    def enc(out, v):
        U32[0](out, len(v))
        out.append(v)

    return enc, lambda r: r.take(U32[1](r))


BYTES = _var_bytes()


def _seq(item: Tuple[Enc, Dec]) -> Tuple[Enc, Dec]:
    ienc, idec = item

    def enc(out, v):
        U32[0](out, len(v))
        for x in v:
            ienc(out, x)

    def dec(r):
        n = U32[1](r)
        if n > len(r.data):
            raise MalformedFrame("sequence length exceeds frame")
        return tuple(idec(r) for _ in range(n))

    return enc, dec


def _opt(item: Tuple[Enc, Dec]) -> Tuple[Enc, Dec]:
    ienc, idec = item

    def enc(out, v):
        if v is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01")
            ienc(out, v)

    def dec(r):
        flag = U8[1](r)
        if flag == 0:
            return None
        if flag != 1:
            raise MalformedFrame("bad optional flag")
        return idec(r)

    return enc, dec


def _record(ctor, parts) -> Tuple[Enc, Dec]:
    getters = [(name, c[0]) for name, c in parts]
    decs = [c[1] for _, c in parts]

    def enc(out, v):
        for name, e in getters:
            e(out, getattr(v, name))

    def dec(r):
        return ctor(*[d(r) for d in decs])

    return enc, dec


def _pos_codec() -> Tuple[Enc, Dec]:
    st = struct.Struct("<II")

    def enc(out, v):
        out.append(st.pack(v[0], v[1]))

    return enc, lambda r: RoundPos(*r.unpack(st))


POS = _pos_codec()
PARTIAL = _record(PartialSig, [("signer", U32), ("over", DIGEST), ("sig", BYTES)])
AGG = _record(AggSig, [("signers", _seq(U32)), ("over", DIGEST), ("sig", BYTES)])
TXE = _record(TxEntry, [("digest", DIGEST), ("leader", U32), ("reqn", U64)])
BLOCK = _record(Block, [("txs", _seq(TXE)), ("proposer", U32), ("pos", POS), ("prev", DIGEST)])
NB = _record(NotarizedBlock, [("block_digest", DIGEST), ("cert", AGG), ("pos", POS)])
REQ = _record(Request, [("client_id", U32), ("client_seq", U64), ("preferred_leader", U32),
                        ("op", BYTES), ("payload_size", U64)])
CERT_ITEM = (lambda out, v: (U32[0](out, v[0]), AGG[0](out, v[1])),
             lambda r: (U32[1](r), AGG[1](r)))

_HDR = [("sender", U32), ("cluster", U32)]

_MSG_CODECS: Dict[type, Tuple[int, Tuple[Enc, Dec]]] = {}
_BY_TAG: Dict[int, type] = {}


def _register(cls, tag: int, schema) -> None:
    cls.TAG = tag
    _MSG_CODECS[cls] = (tag, _record(cls, _HDR + schema))
    _BY_TAG[tag] = cls


_register(RequestMsg, 1, [("req", REQ)])
_register(RequestCopy, 2, [("req", REQ), ("reqn", U64)])
_register(PrepareVote, 4, [("pos", POS), ("partial", PARTIAL)])
_register(Prepared, 5, [("pos", POS), ("nb", NB), ("block", BLOCK)])
_register(PreparedVote, 6, [("pos", POS), ("partial", PARTIAL)])
_register(Commit, 7, [("pos", POS), ("cert", AGG), ("nb", NB), ("block", BLOCK)])
_register(SubRoundChange, 8, [("new_pos", POS), ("target", U32), ("h_nb", DIGEST), ("head", _opt(NB)),
                              ("head_block", _opt(BLOCK)), ("partial", PARTIAL)])
_register(Prepare, 3, [("pos", POS), ("hb", DIGEST), ("h_nb", DIGEST), ("block", BLOCK),
                       ("justify", _opt(NB)), ("justify_block", _opt(BLOCK)),
                       ("changes", _seq(_MSG_CODECS[SubRoundChange][1]))])
_register(GlobalPrepared, 9, [("origin", U32), ("round", U32), ("batch", _seq(NB))])
_register(GlobalVote, 10, [("origin", U32), ("round", U32), ("partial", PARTIAL)])
_register(GlobalCommit, 11, [("origin", U32), ("round", U32), ("batch_digest", DIGEST),
                             ("certs", _seq(CERT_ITEM))])
_register(GlobalRoundChange, 12, [("origin", U32), ("round", U32), ("target", U32), ("partial", PARTIAL)])
_register(Reply, 13, [("client_id", U32), ("client_seq", U64), ("digest", DIGEST)])
_register(MirPrePrepare, 20, [("epoch", U32), ("leader", U32), ("counter", U64), ("batch", _seq(DIGEST))])
_register(MirPrepare, 21, [("epoch", U32), ("leader", U32), ("counter", U64), ("batch_digest", DIGEST)])
_register(MirCommit, 22, [("epoch", U32), ("leader", U32), ("counter", U64), ("batch_digest", DIGEST)])
_register(MirEpochChange, 23, [("epoch", U32), ("suspects", _seq(U32))])

BUNDLE_TAG = 14
Bundle.TAG = BUNDLE_TAG
_BY_TAG[BUNDLE_TAG] = Bundle
_PHASE_ORDER = {Commit: 0, Prepared: 1, Prepare: 2}


def _encode_into(out: List[bytes], msg: Msg) -> None:
    if isinstance(msg, Bundle):
        if not msg.parts or len(msg.parts) > 255:
            raise MalformedFrame("bundle must hold 1..255 parts")
        out.append(bytes((BUNDLE_TAG, len(msg.parts))))
        for p in msg.parts:
            if type(p) not in _PHASE_ORDER:
                raise MalformedFrame("bundles carry only prepare/prepared/commit")
            _encode_into(out, p)
        return
    try:
        tag, (enc, _) = _MSG_CODECS[type(msg)]
    except KeyError:
        raise MalformedFrame(f"no wire format for {type(msg).__name__}") from None
    out.append(bytes((tag,)))
    enc(out, msg)


def encode(msg: Msg) -> bytes:
    out: List[bytes] = []
    _encode_into(out, msg)
    return b"".join(out)


def _decode_one(r: _Reader) -> Msg:
    tag = U8[1](r)
    if tag == BUNDLE_TAG:
        count = U8[1](r)
        if count == 0:
            raise MalformedFrame("empty bundle")
        parts = tuple(_decode_one(r) for _ in range(count))
        if any(type(p) not in _PHASE_ORDER for p in parts):
            raise MalformedFrame("bundles carry only prepare/prepared/commit")
        return Bundle(parts)
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise MalformedFrame(f"unknown tag {tag}")
    return _MSG_CODECS[cls][1][1](r)


def decode(data: bytes) -> Msg:
    if not data:
        raise MalformedFrame("empty frame")
    r = _Reader(bytes(data))
    try:
        msg = _decode_one(r)
    except (struct.error, TypeError) as e:
        raise MalformedFrame(str(e)) from None
    if r.off != len(r.data):
        raise MalformedFrame("trailing bytes")
    return msg


def wire_size(msg: Msg) -> int:
    size = len(encode(msg))
    if isinstance(msg, (RequestMsg, RequestCopy)):
        size += msg.req.payload_size
    return size


def make_bundle(parts) -> Bundle:
    """Bundle phase messages, oldest phase first (commit, prepared, prepare)."""
    parts = sorted(parts, key=lambda m: (_PHASE_ORDER[type(m)], m.pos))
    return Bundle(tuple(parts))


def split(bundle: Bundle) -> Tuple[Msg, ...]:
    if not isinstance(bundle, Bundle) or not bundle.parts:
        raise MalformedFrame("empty bundle")
    if any(type(p) not in _PHASE_ORDER for p in bundle.parts):
        raise MalformedFrame("bundles carry only prepare/prepared/commit")
    return tuple(sorted(bundle.parts, key=lambda m: (_PHASE_ORDER[type(m)], m.pos)))


def _short(v) -> str:
    if isinstance(v, bytes):
        return v[:4].hex()
    if isinstance(v, RoundPos):
        return str(v)
    if isinstance(v, Block):
        return f"Block{v.pos}[{len(v.txs)}tx]"
    if isinstance(v, NotarizedBlock):
        return f"NB{v.pos}:{v.block_digest[:4].hex()}"
    if isinstance(v, (PartialSig, AggSig)):
        return f"sig:{v.over[:4].hex()}"
    if isinstance(v, tuple):
        return f"[{len(v)}]"
    if isinstance(v, Request):
        return f"req(c={v.client_id},s={v.client_seq})"
    return str(v)


def render(msg: Msg) -> str:
    """One-line human-readable form for logs."""
    if isinstance(msg, Bundle):
        return "Bundle(" + " + ".join(render(p) for p in msg.parts) + ")"
    body = ",".join(f"{f.name}={_short(getattr(msg, f.name))}" for f in fields(msg) if f.name != "cluster")
    return f"{type(msg).__name__}({body})"
