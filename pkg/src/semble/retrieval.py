"""Exact nearest-neighbour retrieval and hubness diagnostics.

Retrieval quality is judged without class labels, on two measures:

* rating correlation: Pearson correlation between embedding-space and
  rating-space pairwise distances over all unique pairs;
* hubness: skewness of the k-occurrence distribution N_k, where
  N_k(x) counts how many other items list x among their k nearest
  neighbours. The hubness index exp(-|skewness|), averaged over a
  small set of k values, maps to [0, 1] with 1 meaning no hubness.

All neighbour searches are exact brute force with ties broken toward
the lower id, so every diagnostic is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError, NormalizationError
from .ratings import DistanceMatrix

DEFAULT_K_SET = (3, 5, 7, 11, 17)


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    """Immutable snapshot of item ids and their embedding vectors."""

    ids: tuple
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=float)
        if vectors.ndim != 2:
            raise DomainError(f"vectors must be 2-D, got shape {vectors.shape}")
        if len(self.ids) != vectors.shape[0]:
            raise DomainError(
                f"{len(self.ids)} ids for {vectors.shape[0]} vectors"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DomainError("duplicate ids in embedding index")
        vectors.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "vectors", vectors)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


def build_index(ids, vectors, require_unit_norm: bool = True) -> EmbeddingIndex:
    """Validate and freeze an embedding collection for querying.

    ``require_unit_norm=False`` admits raw test vectors that skip the
    normalization layer.
    """
    index = EmbeddingIndex(tuple(ids), np.asarray(vectors, dtype=float))
    if require_unit_norm:
        norms = np.sqrt(np.sum(index.vectors ** 2, axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(norms - 1.0) > 1e-6))
            raise NormalizationError(
                f"vector for id {index.ids[bad]!r} has norm {norms[bad]:.8f}"
            )
    return index


def _id_sort_key(index: EmbeddingIndex) -> np.ndarray:
    return np.asarray(index.ids)


def _pairwise(index: EmbeddingIndex) -> np.ndarray:
    v = index.vectors
    gram = v @ v.T
    gram = 0.5 * (gram + gram.T)
    sq = np.sum(v * v, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * gram
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(np.maximum(d2, 0.0))


def knn_query(index: EmbeddingIndex, query: np.ndarray, k: int) -> list[tuple]:
    """Exact k nearest neighbours of a query vector, ascending distance.

    Distance ties are broken toward the lower id. The query is matched
    against every indexed item; coincident items come back at distance
    zero (self-exclusion only applies to the k-occurrence statistics).
    """
    if not 1 <= k < index.size:
        raise DomainError(f"k must satisfy 1 <= k < {index.size}, got {k}")
    q = np.asarray(query, dtype=float)
    diff = index.vectors - q[None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    order = np.lexsort((_id_sort_key(index), dist))[:k]
    return [(index.ids[i], float(dist[i])) for i in order]


def _neighbor_table(index: EmbeddingIndex, k: int) -> np.ndarray:
    """Row i holds the positions of item i's k nearest other items."""
    if not 1 <= k < index.size:
        raise DomainError(f"k must satisfy 1 <= k < {index.size}, got {k}")
    dist = _pairwise(index)
    np.fill_diagonal(dist, np.inf)
    ids = _id_sort_key(index)
    out = np.empty((index.size, k), dtype=int)
    for i in range(index.size):
        out[i] = np.lexsort((ids, dist[i]))[:k]
    return out


@dataclass(frozen=True, eq=False)
class KOccurrenceProfile:
    """N_k counts aligned with the index id order.

    Profiles produced by :func:`k_occurrences` satisfy
    ``counts.sum() == k * N``; the container itself does not enforce the
    identity so raw count distributions can be analysed too.
    """

    k: int
    ids: tuple
    counts: np.ndarray

    def __post_init__(self):
        counts = np.array(self.counts, dtype=int)
        if counts.ndim != 1 or counts.shape[0] != len(self.ids):
            raise DomainError("counts must align with ids")
        if np.any(counts < 0):
            raise DomainError("k-occurrence counts must be nonnegative")
        counts.setflags(write=False)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "counts", counts)


def k_occurrences(index: EmbeddingIndex, k: int) -> KOccurrenceProfile:
    """How many other items list each item among their k nearest."""
    table = _neighbor_table(index, k)
    counts = np.bincount(table.ravel(), minlength=index.size)
    return KOccurrenceProfile(k, index.ids, counts)


def hubness_skewness(profile) -> float:
    """Population skewness g1 of the k-occurrence counts.

    The unadjusted standardized third moment m3 / m2^(3/2) is used; a
    constant count distribution has skewness 0 by convention.
    """
    counts = profile.counts if isinstance(profile, KOccurrenceProfile) else np.asarray(profile, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if counts.size < 3:
        raise DomainError(f"need at least 3 counts, got {counts.size}")
    dev = counts - counts.mean()
    m2 = np.mean(dev ** 2)
    if m2 == 0.0:
        return 0.0
    m3 = np.mean(dev ** 3)
    return float(m3 / m2 ** 1.5)


def hubness_index(index: EmbeddingIndex, k_set=DEFAULT_K_SET) -> float:
    """Mean of exp(-|skewness|) over the k set; 1 means no hubness."""
    k_set = tuple(k_set)
    if not k_set:
        raise DomainError("k set must be nonempty")
    if max(k_set) >= index.size:
        raise DomainError(
            f"largest k {max(k_set)} must be below the index size {index.size}"
        )
    values = [
        np.exp(-abs(hubness_skewness(k_occurrences(index, k)))) for k in k_set
    ]
    return float(np.mean(values))


def hubness_summary(index: EmbeddingIndex, k_set=DEFAULT_K_SET):
    """Per-k profile, skewness and index value, for reporting."""
    rows = []
    for k in k_set:
        profile = k_occurrences(index, k)
        skew = hubness_skewness(profile)
        rows.append((k, profile, skew, float(np.exp(-abs(skew)))))
    return rows


def rating_correlation(embedding_dm, rating_dm) -> float:
    """Pearson correlation between two distance matrices' upper triangles."""
    a = embedding_dm.entries if isinstance(embedding_dm, DistanceMatrix) else np.asarray(embedding_dm, dtype=float)
    b = rating_dm.entries if isinstance(rating_dm, DistanceMatrix) else np.asarray(rating_dm, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"matrices must be square and equal size: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 3:
        raise DomainError("need at least 3 items for a distance correlation")
    iu = np.triu_indices(n, k=1)
    x = a[iu]
    y = b[iu]
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.sum(xc * xc))
    syy = float(np.sum(yc * yc))
    if sxx <= 0.0 or syy <= 0.0:
        raise DegenerateInputError("constant upper triangle in distance correlation")
    return float(np.sum(xc * yc) / np.sqrt(sxx * syy))


@dataclass(frozen=True, eq=False)
class HubReport:
    """The largest hub, its reverse queries and the orphans, for one k."""

    k: int
    hub_id: object
    hub_count: int
    reverse_query_ids: tuple
    orphan_ids: tuple
    skewness: float
    index_value: float


def hub_report(index: EmbeddingIndex, k: int) -> HubReport:
    """Identify the largest hub (ties toward the lower id) and the orphans."""
    table = _neighbor_table(index, k)
    counts = np.bincount(table.ravel(), minlength=index.size)
    max_count = int(counts.max())
    candidates = [index.ids[i] for i in np.flatnonzero(counts == max_count)]
    hub_id = min(candidates)
    hub_pos = index.ids.index(hub_id)
    reverse = tuple(sorted(
        index.ids[i] for i in np.flatnonzero((table == hub_pos).any(axis=1))
    ))
    orphans = tuple(sorted(index.ids[i] for i in np.flatnonzero(counts == 0)))
    skew = hubness_skewness(counts.astype(float)) if index.size >= 3 else 0.0
    return HubReport(
        k=k,
        hub_id=hub_id,
        hub_count=max_count,
        reverse_query_ids=reverse,
        orphan_ids=orphans,
        skewness=skew,
        index_value=float(np.exp(-abs(skew))),
    )
