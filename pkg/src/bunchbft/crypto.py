"""Hashing, partial signatures and quorum-certificate aggregation.

Two signing backends share one interface:

``test``
    Keyed BLAKE2b over the digest.  The "public key" equals the secret, so
    this gives no security at all; it exists because it is fast and
    bit-for-bit deterministic, which the simulator needs.
``real``
    Ed25519 from the ``cryptography`` package, with keys derived from a seed.

Aggregation is a multiset of partials: the aggregate keeps the signer list
(sorted, duplicate free) and the concatenated signatures in signer order, and
is verified signer by signer.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Tuple

DIGEST_SIZE = 32

Digest = bytes
ReplicaId = int


class CryptoError(ValueError):
    pass


class MixedDigest(CryptoError):
    pass


class DuplicateSigner(CryptoError):
    pass


class UnknownSigner(CryptoError, KeyError):
    pass


def hash_bytes(data: bytes) -> Digest:
    """SHA-256; ``hash_bytes(b"")`` is the usual ``e3b0c442...b855``."""
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class PartialSig:
    signer: ReplicaId
    over: Digest
    sig: bytes


@dataclass(frozen=True)
class AggSig:
    signers: Tuple[ReplicaId, ...]
    over: Digest
    sig: bytes

    def __len__(self) -> int:
        return len(self.signers)


class _TestScheme:
    name = "test"
    sig_len = 32

    def keypair(self, seed: bytes, rid: ReplicaId) -> Tuple[bytes, bytes]:
        secret = hash_bytes(b"bunchbft-test-key|" + seed + b"|" + str(rid).encode())
        return secret, secret

    def sign(self, secret: bytes, over: Digest) -> bytes:
        return hashlib.blake2b(over, key=secret, digest_size=32).digest()

    def verify(self, public: bytes, over: Digest, sig: bytes) -> bool:
        return hashlib.blake2b(over, key=public, digest_size=32).digest() == sig


class _Ed25519Scheme:
    name = "real"
    sig_len = 64

    def __init__(self) -> None:
        from cryptography.hazmat.primitives.asymmetric import ed25519
        from cryptography.exceptions import InvalidSignature

        self._ed = ed25519
        self._invalid = InvalidSignature
        self._pub_cache: Dict[bytes, object] = {}

    def keypair(self, seed: bytes, rid: ReplicaId) -> Tuple[object, bytes]:
        from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

        raw = hash_bytes(b"bunchbft-ed25519|" + seed + b"|" + str(rid).encode())
        sk = self._ed.Ed25519PrivateKey.from_private_bytes(raw)
        pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return sk, pub

    def sign(self, secret, over: Digest) -> bytes:
        return secret.sign(over)

    def verify(self, public: bytes, over: Digest, sig: bytes) -> bool:
        pk = self._pub_cache.get(public)
        if pk is None:
            pk = self._ed.Ed25519PublicKey.from_public_bytes(public)
            self._pub_cache[public] = pk
        try:
            pk.verify(sig, over)
        except (self._invalid, ValueError):
            return False
        return True


BACKENDS = ("test", "real")


def make_scheme(backend: str):
    if backend == "test":
        return _TestScheme()
    if backend == "real":
        return _Ed25519Scheme()
    raise ValueError(f"unknown crypto backend {backend!r}; expected one of {BACKENDS}")


class KeyRing:
    """Signing keys and public keys for a fixed set of replicas.

    In the simulator every replica shares one ring; a replica only ever signs
    with its own id, which the engines enforce by construction.
    """

    def __init__(self, replica_ids: Iterable[ReplicaId], backend: str = "test", seed: bytes = b"") -> None:
        self.scheme = make_scheme(backend)
        self.backend = backend
        self._secret: Dict[ReplicaId, object] = {}
        self.pubkeys: Dict[ReplicaId, bytes] = {}
        for rid in replica_ids:
            sk, pk = self.scheme.keypair(seed, rid)
            self._secret[rid] = sk
            self.pubkeys[rid] = pk

    @property
    def sig_len(self) -> int:
        return self.scheme.sig_len

    def sign(self, signer: ReplicaId, over: Digest) -> PartialSig:
        return PartialSig(signer, over, self.scheme.sign(self._secret[signer], over))

    def verify(self, part: PartialSig, pubkeys: Mapping[ReplicaId, bytes] | None = None) -> bool:
        keys = self.pubkeys if pubkeys is None else pubkeys
        pub = keys.get(part.signer)
        if pub is None:
            return False
        if len(part.sig) != self.scheme.sig_len:
            return False
        return self.scheme.verify(pub, part.over, part.sig)

    def verify_agg(self, agg: AggSig, threshold: int, pubkeys: Mapping[ReplicaId, bytes] | None = None) -> bool:
        return verify_agg(agg, threshold, self.pubkeys if pubkeys is None else pubkeys, self.scheme)


def sign(ring: KeyRing, signer: ReplicaId, over: Digest) -> PartialSig:
    return ring.sign(signer, over)


def verify(ring: KeyRing, signer: ReplicaId, over: Digest, sig: bytes) -> bool:
    return ring.verify(PartialSig(signer, over, sig))


def aggregate(parts: Iterable[PartialSig]) -> AggSig:
    parts = list(parts)
    if not parts:
        raise CryptoError("cannot aggregate an empty set of partial signatures")
    over = parts[0].over
    seen: Dict[ReplicaId, PartialSig] = {}
    for p in parts:
        if p.over != over:
            raise MixedDigest("partial signatures cover different digests")
        if p.signer in seen:
            raise DuplicateSigner(f"replica {p.signer} signed twice")
        seen[p.signer] = p
    order = sorted(seen)
    return AggSig(tuple(order), over, b"".join(seen[s].sig for s in order))


def verify_agg(agg: AggSig, threshold: int, pubkeys: Mapping[ReplicaId, bytes], scheme) -> bool:
    """True iff every claimed signer verifies and there are at least ``threshold``.

    Raises ``UnknownSigner`` if a signer has no public key.
    """
    signers = agg.signers
    if len(set(signers)) != len(signers) or list(signers) != sorted(signers):
        return False
    for s in signers:
        if s not in pubkeys:
            raise UnknownSigner(s)
    if len(signers) < threshold:
        return False
    step = scheme.sig_len
    if len(agg.sig) != step * len(signers):
        return False
    for i, s in enumerate(signers):
        if not scheme.verify(pubkeys[s], agg.over, agg.sig[i * step:(i + 1) * step]):
            return False
    return True
