"""Domain values shared by every protocol variant.

Identifiers are plain ints.  Replica ids are global: replica ``i`` of cluster
``c`` is ``c * n + i`` when clusters are built with :func:`make_topology`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Mapping, NamedTuple, Optional, Sequence, Tuple

from .crypto import AggSig, Digest, hash_bytes

ReplicaId = int
ClientId = int

GENESIS: Digest = bytes(32)
NO_REQN = 0

_U32 = struct.Struct("<I")
_BLOCK_HEAD = struct.Struct("<III32sI")
_TX = struct.Struct("<32sIQ")
_REQ_HEAD = struct.Struct("<IQII")


class ConfigError(ValueError):
    pass


class RoundPos(NamedTuple):
    """(round, sub-round); tuple ordering is the protocol order."""

    round: int
    sub_round: int

    def __str__(self) -> str:
        return f"({self.round},{self.sub_round})"


ORIGIN = RoundPos(0, 0)


@dataclass(frozen=True)
class ClusterConfig:
    cluster_id: int
    members: Tuple[ReplicaId, ...]
    f: int
    k: int
    peer_clusters: Mapping[int, Tuple[ReplicaId, ...]] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.f < 0:
            raise ConfigError("fault bound must be non-negative")
        if len(self.members) != 3 * self.f + 1:
            raise ConfigError(f"cluster {self.cluster_id}: n={len(self.members)} but 3f+1={3 * self.f + 1}")
        if len(set(self.members)) != len(self.members):
            raise ConfigError("duplicate cluster members")
        if self.k <= self.f:
            raise ConfigError(f"sub-round length k={self.k} must exceed f={self.f}")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def n(self) -> int:
        return len(self.members)

    def index_of(self, rid: ReplicaId) -> int:
        return self.members.index(rid)

    def __contains__(self, rid: object) -> bool:
        return rid in self.members


def quorum_size(cfg: ClusterConfig) -> int:
    return cfg.n - cfg.f


def copies_threshold(cfg: ClusterConfig) -> int:
    return cfg.f + 1


def next_pos(pos: RoundPos, cfg: ClusterConfig) -> RoundPos:
    if pos.sub_round + 1 < cfg.k:
        return RoundPos(pos.round, pos.sub_round + 1)
    return RoundPos(pos.round + 1, 0)


def pos_index(pos: RoundPos, cfg: ClusterConfig) -> int:
    """Linear slot number of a position."""
    return pos.round * cfg.k + pos.sub_round


class Topology:
    """All cluster configurations of a deployment, indexed both ways."""

    def __init__(self, clusters: Sequence[ClusterConfig]) -> None:
        self.clusters: Dict[int, ClusterConfig] = {c.cluster_id: c for c in clusters}
        self.cluster_of: Dict[ReplicaId, int] = {}
        for c in clusters:
            for r in c.members:
                if r in self.cluster_of:
                    raise ConfigError(f"replica {r} belongs to two clusters")
                self.cluster_of[r] = c.cluster_id

    def __getitem__(self, cid: int) -> ClusterConfig:
        return self.clusters[cid]

    def __len__(self) -> int:
        return len(self.clusters)

    @property
    def replicas(self) -> Tuple[ReplicaId, ...]:
        return tuple(r for c in self.clusters.values() for r in c.members)

    def config_of(self, rid: ReplicaId) -> ClusterConfig:
        return self.clusters[self.cluster_of[rid]]

    def peer(self, cid: int, index: int) -> ReplicaId:
        return self.clusters[cid].members[index]


def make_topology(clusters: int, f: int, k: int) -> Topology:
    n = 3 * f + 1
    members = {c: tuple(range(c * n, (c + 1) * n)) for c in range(clusters)}
    cfgs = []
    for c in range(clusters):
        peers = {o: m for o, m in members.items() if o != c}
        cfgs.append(ClusterConfig(c, members[c], f, k, peers))
    return Topology(cfgs)


@dataclass(frozen=True)
class Request:
    """A client operation.  ``payload_size`` bytes are accounted, not carried."""

    client_id: ClientId
    client_seq: int
    preferred_leader: ReplicaId
    op: bytes = b""
    payload_size: int = 0

    @cached_property
    def digest(self) -> Digest:
        return hash_bytes(
            b"REQ" + _REQ_HEAD.pack(self.client_id, self.client_seq, self.preferred_leader, len(self.op))
            + self.op + struct.pack("<Q", self.payload_size)
        )


class TxEntry(NamedTuple):
    """A transaction inside a block: digest plus its ordering key."""

    digest: Digest
    leader: ReplicaId
    reqn: int

    def sort_key(self):
        return (self.leader, self.reqn if self.reqn != NO_REQN else 1 << 64, self.digest)


@dataclass(frozen=True)
class Block:
    txs: Tuple[TxEntry, ...]
    proposer: ReplicaId
    pos: RoundPos
    prev: Digest

    @cached_property
    def canonical(self) -> bytes:
        parts = [b"BLK", _BLOCK_HEAD.pack(self.proposer, self.pos.round, self.pos.sub_round, self.prev, len(self.txs))]
        parts.extend(_TX.pack(t.digest, t.leader, t.reqn) for t in self.txs)
        return b"".join(parts)

    @cached_property
    def digest(self) -> Digest:
        return hash_bytes(self.canonical)

    @property
    def tx_digests(self) -> Tuple[Digest, ...]:
        return tuple(t.digest for t in self.txs)


@dataclass(frozen=True)
class NotarizedBlock:
    block_digest: Digest
    cert: AggSig
    pos: RoundPos

    @cached_property
    def digest(self) -> Digest:
        """What commit-phase votes sign; distinct from the block digest."""
        return hash_bytes(b"NB" + self.block_digest + struct.pack("<II", *self.pos))


def block_from(entries, proposer: ReplicaId, pos: RoundPos, prev: Digest) -> Block:
    return Block(tuple(entries), proposer, pos, prev)


def head_digest(head: Optional[NotarizedBlock]) -> Digest:
    return GENESIS if head is None else head.block_digest
