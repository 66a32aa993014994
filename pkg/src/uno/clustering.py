"""Dual-feature vectors and Ward-linkage agglomerative clustering.

Merging always takes the pair with the smallest Ward increment

    dW(A, B) = |A||B| / (|A|+|B|) * ||mu_A - mu_B||^2

and halts the first time the smallest available increment exceeds the
variance threshold.  Ties are broken by the lexicographically smallest
pair of canonical cluster ids; an id is the SHA-256 over the sorted
member point digests, with member indices as the final tie-break.  This
makes the partition deterministic and independent of input order.

Costs are always computed from canonically ordered member lists (never
incrementally), so the merge trace is bit-comparable with a from-scratch
reference implementation.  A candidate heap keeps the search at
O(n^2 log n); fine for corpora of a few thousand sessions.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .backends.base import EmbeddingBackend
from .types import PreferencePair

_UNIT_TOL = 1e-6


class ClusteringError(Exception):
    pass


@dataclass(frozen=True)
class FeatureVector:
    """Unit-normalized query and rules embeddings, concatenated."""

    query_part: np.ndarray
    rules_part: np.ndarray

    def __post_init__(self) -> None:
        for name, part in (("query_part", self.query_part), ("rules_part", self.rules_part)):
            norm = float(np.linalg.norm(part))
            if abs(norm - 1.0) > _UNIT_TOL:
                raise ClusteringError(f"{name} must have unit L2 norm, got {norm}")
        if self.query_part.shape != self.rules_part.shape:
            raise ClusteringError("query and rules parts must share one dimension")

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.query_part, self.rules_part])


def normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ClusteringError("cannot normalize a zero embedding vector")
    return vec / norm


def build_features(
    pairs: Sequence[PreferencePair], embed_backend: EmbeddingBackend
) -> list[FeatureVector]:
    """One dual-feature vector per pair; rules are embedded joined by
    newlines."""
    if not pairs:
        raise ClusteringError("cannot build features for an empty pair list")
    queries = [p.query for p in pairs]
    rule_texts = [p.rules.joined() for p in pairs]
    q_embs = embed_backend.embed(queries)
    r_embs = embed_backend.embed(rule_texts)
    return [
        FeatureVector(query_part=normalize(q), rules_part=normalize(r))
        for q, r in zip(q_embs, r_embs)
    ]


# ---------------------------------------------------------------------------
# Ward clustering


def point_digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=np.float64).tobytes()).hexdigest()


def cluster_digest(point_digests: Sequence[str]) -> str:
    return hashlib.sha256("".join(sorted(point_digests)).encode("ascii")).hexdigest()


def ward_increment(size_a: int, mu_a: np.ndarray, size_b: int, mu_b: np.ndarray) -> float:
    diff = mu_a - mu_b
    return (size_a * size_b) / (size_a + size_b) * float(diff @ diff)


@dataclass(frozen=True)
class MergeStep:
    left: Tuple[int, ...]
    right: Tuple[int, ...]
    cost: float

    def to_dict(self) -> dict:
        return {"left": list(self.left), "right": list(self.right), "cost": self.cost}


@dataclass(frozen=True)
class WardResult:
    partition: Tuple[Tuple[int, ...], ...]
    merges: Tuple[MergeStep, ...]
    rejected_cost: Optional[float]


def _as_matrix(features: Sequence) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = features
    else:
        rows = [f.full if isinstance(f, FeatureVector) else np.asarray(f, dtype=float) for f in features]
        X = np.stack(rows)
    return np.ascontiguousarray(X, dtype=np.float64)


def ward_cluster(features: Sequence, epsilon_var: float) -> WardResult:
    """Bottom-up merging until the minimal Ward increment exceeds
    ``epsilon_var``.  Returns the partition (member index tuples in
    canonical order) and the accepted merge trace."""
    if epsilon_var <= 0:
        raise ClusteringError(f"epsilon_var must be > 0, got {epsilon_var}")
    X = _as_matrix(features)
    n = X.shape[0]
    if n == 0:
        raise ClusteringError("need at least one feature vector")

    pdigs = [point_digest(X[i]) for i in range(n)]
    members: dict[int, Tuple[int, ...]] = {}
    keys: dict[int, tuple] = {}  # (digest, members) ordering key
    cents: dict[int, np.ndarray] = {}
    alive: set[int] = set()

    def add_cluster(cid: int, mem: Tuple[int, ...]) -> None:
        members[cid] = mem
        keys[cid] = (cluster_digest([pdigs[i] for i in mem]), mem)
        cents[cid] = X[list(mem)].mean(axis=0)
        alive.add(cid)

    for i in range(n):
        add_cluster(i, (i,))

    heap: list[tuple] = []

    def push(a: int, b: int) -> None:
        if keys[b] < keys[a]:
            a, b = b, a
        cost = ward_increment(len(members[a]), cents[a], len(members[b]), cents[b])
        heapq.heappush(heap, (cost, keys[a], keys[b], a, b))

    ids = sorted(alive)
    for i_pos, a in enumerate(ids):
        for b in ids[i_pos + 1 :]:
            push(a, b)

    merges: list[MergeStep] = []
    rejected: Optional[float] = None
    next_id = n
    while len(alive) > 1:
        entry = None
        while heap:
            cand = heapq.heappop(heap)
            if cand[3] in alive and cand[4] in alive:
                entry = cand
                break
        if entry is None:
            break
        cost, _, _, a, b = entry
        if cost > epsilon_var:
            rejected = cost
            break
        merges.append(MergeStep(left=members[a], right=members[b], cost=cost))
        merged = tuple(sorted(members[a] + members[b]))
        alive.discard(a)
        alive.discard(b)
        cid = next_id
        next_id += 1
        others = list(alive)
        add_cluster(cid, merged)
        for other in others:
            push(cid, other)

    partition = tuple(members[cid] for cid in sorted(alive, key=lambda c: keys[c]))
    return WardResult(partition=partition, merges=tuple(merges), rejected_cost=rejected)


# ---------------------------------------------------------------------------
# Centroids


def compute_centroids(
    partition: Sequence[Tuple[int, ...]], features: Sequence[FeatureVector]
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per cluster: (mean of full vectors, re-normalized mean of query
    parts).  The query centroid is the routing key."""
    covered = sorted(i for cluster in partition for i in cluster)
    if covered != list(range(len(features))):
        raise ClusteringError("partition must cover every feature exactly once")
    out = []
    for cluster in partition:
        fulls = np.stack([features[i].full for i in cluster])
        queries = np.stack([features[i].query_part for i in cluster])
        centroid_full = fulls.mean(axis=0)
        query_mean = queries.mean(axis=0)
        norm = float(np.linalg.norm(query_mean))
        if norm == 0.0:
            raise ClusteringError("query centroid collapsed to zero; cannot normalize")
        out.append((centroid_full, query_mean / norm))
    return out
