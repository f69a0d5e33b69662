"""Post-run safety checks over replica states.

Each check returns a list of human-readable violations; an empty list means
the property held.
"""

from __future__ import annotations

from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set

from .core import GENESIS, Block, NotarizedBlock, Topology, quorum_size
from .crypto import CryptoError, Digest, KeyRing


def verify_chain(log: Sequence[NotarizedBlock], blocks: Mapping[Digest, Block],
                 keys: Optional[KeyRing] = None, quorum: int = 1) -> List[str]:
    """Check that ``log`` is a hash chain from genesis with increasing positions.

    With ``keys`` each certificate is also verified against ``quorum``.
    """
    problems = []
    prev = GENESIS
    last = None
    for i, nb in enumerate(log):
        b = blocks.get(nb.block_digest)
        if b is None:
            problems.append(f"entry {i}: block {nb.block_digest.hex()[:8]} missing")
            break
        if b.digest != nb.block_digest:
            problems.append(f"entry {i}: block content does not hash to its digest")
        if b.prev != prev:
            problems.append(f"entry {i}: prev link {b.prev.hex()[:8]} != {prev.hex()[:8]}")
        if b.pos != nb.pos or (last is not None and nb.pos <= last):
            problems.append(f"entry {i}: position {nb.pos} out of order")
        if keys is not None:
            try:
                ok = nb.cert.over == nb.block_digest and keys.verify_agg(nb.cert, quorum)
            except CryptoError:
                ok = False
            if not ok:
                problems.append(f"entry {i}: invalid certificate")
        prev = nb.block_digest
        last = nb.pos
    return problems


def chain_ok(log, blocks, keys=None, quorum: int = 1) -> bool:
    return not verify_chain(log, blocks, keys, quorum)


def agreement(replicas: Iterable) -> List[str]:
    """No two replicas commit different blocks at one (cluster, round, sub-round)."""
    seen: Dict[tuple, Dict[Digest, List[int]]] = defaultdict(lambda: defaultdict(list))
    for r in replicas:
        for pos, nb in r.committed.items():
            seen[(r.cid, pos)][nb.block_digest].append(r.id)
    out = []
    for key in sorted(seen):
        if len(seen[key]) > 1:
            who = {d.hex()[:8]: ids for d, ids in seen[key].items()}
            out.append(f"cluster {key[0]} pos {key[1]}: conflicting commits {who}")
    return out


def prefix_consistency(replicas: Iterable) -> List[str]:
    """Committed chains of one cluster are prefixes of each other."""
    by_cluster = defaultdict(list)
    for r in replicas:
        by_cluster[r.cid].append([nb.block_digest for nb in r.log[:r.commit_height]])
    out = []
    for cid, chains in sorted(by_cluster.items()):
        chains.sort(key=len)
        for a, b in zip(chains, chains[1:]):
            if b[:len(a)] != a:
                out.append(f"cluster {cid}: committed chains diverge")
                break
    return out


def mir_agreement(replicas: Iterable) -> List[str]:
    seen: Dict[tuple, Set[Digest]] = defaultdict(set)
    for r in replicas:
        for slot, d in r.committed.items():
            seen[slot].add(d)
    return [f"slot {s}: {len(ds)} different batches" for s, ds in sorted(seen.items()) if len(ds) > 1]


def global_agreement(replicas: Iterable) -> List[str]:
    """Every replica that globally committed (origin, round) did so on the same batch."""
    seen: Dict[tuple, Set[Digest]] = defaultdict(set)
    for r in replicas:
        xc = getattr(r, "xc", None)
        if xc is None:
            continue
        for key, d in xc.committed.items():
            seen[key].add(d)
        for rnd, st in xc.rounds.items():
            got = xc.committed.get((r.cid, rnd))
            if got is not None and st.digest is not None and got != st.digest:
                return [f"replica {r.id}: global commit of round {rnd} differs from its local batch"]
    return [f"origin {k[0]} round {k[1]}: {len(ds)} different batches" for k, ds in sorted(seen.items())
            if len(ds) > 1]


def validity(replicas: Sequence, submitted: Set[Digest], topo: Topology) -> List[str]:
    """Each committed tx was submitted by a client and witnessed by at least f+1 members."""
    copies: Dict[tuple, Set[int]] = defaultdict(set)
    for r in replicas:
        for d, e in r.pool.entries.items():
            copies[(r.cid, d)] |= e.copies
    out = []
    for r in replicas:
        need = topo[r.cid].f + 1
        for nb in r.log[:r.commit_height]:
            for t in r.blocks[nb.block_digest].txs:
                if t.digest not in submitted:
                    out.append(f"replica {r.id}: committed unknown tx {t.digest.hex()[:8]}")
                elif len(copies[(r.cid, t.digest)] & set(topo[r.cid].members)) < need:
                    out.append(f"replica {r.id}: tx {t.digest.hex()[:8]} committed with too few copies")
    return out


def mir_validity(replicas: Sequence, submitted: Set[Digest], f: int) -> List[str]:
    holders: Dict[Digest, int] = defaultdict(int)
    for r in replicas:
        for d in r.requests:
            holders[d] += 1
    out = []
    for r in replicas:
        for d in r.committed_tx:
            if d not in submitted:
                out.append(f"replica {r.id}: committed unknown tx {d.hex()[:8]}")
            elif holders[d] < f + 1:
                out.append(f"replica {r.id}: tx {d.hex()[:8]} held by fewer than f+1 replicas")
    return out


def run_all(replicas: Sequence, submitted: Set[Digest], topo: Topology, keys: Optional[KeyRing] = None) -> List[str]:
    """Every applicable check for one finished run."""
    if not replicas:
        return []
    if getattr(replicas[0], "mode", "") == "mir":
        return mir_agreement(replicas) + mir_validity(replicas, submitted, replicas[0].cfg.f)
    out = agreement(replicas) + prefix_consistency(replicas) + global_agreement(replicas)
    out += validity(replicas, submitted, topo)
    for r in replicas:
        out += [f"replica {r.id}: {p}" for p in verify_chain(r.log, r.blocks, keys, quorum_size(r.cfg))]
    return out
