"""Rating vectors, rating sets and the semantic set-to-set distance.

Each retrievable patch carries one characteristic-score vector per
annotator (nine ordinal scores by default). Ground-truth similarity
between two patches is a symmetric mean-of-minima distance between
their rating sets: every rating in one set is matched to its nearest
rating in the other set by L2 distance, the matches are averaged
within each direction and the two directions are averaged.

The mean-of-minima distance is symmetric and nonnegative but it is
not a metric; callers must not rely on the triangle inequality.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, SchemaError

DEFAULT_CHARACTERISTIC_NAMES = (
    "Subtlety",
    "Internal Structure",
    "Calcification",
    "Sphericity",
    "Margin",
    "Lobulation",
    "Spiculation",
    "Texture",
    "Malignancy",
)

# Calcification is scored 1-6 in LIDC exports, so the default range
# accepts 6 everywhere instead of rejecting real annotation data.
DEFAULT_SCORE_RANGE = (1.0, 6.0)

# Continuous mean-malignancy thresholds, midpoints between the integer
# score bins 1-2 (benign), 3 (unknown) and 4-5 (malignant).
BENIGN_MAX = 2.5
MALIGNANT_MIN = 3.5


class MalignancyClass(str, Enum):
    BENIGN = "benign"
    UNKNOWN = "unknown"
    MALIGNANT = "malignant"


@dataclass(frozen=True)
class CharacteristicSchema:
    """Ordered characteristic labels plus the valid score range of each."""

    names: tuple[str, ...] = DEFAULT_CHARACTERISTIC_NAMES
    ranges: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if len(self.names) < 1:
            raise SchemaError("schema needs at least one characteristic")
        ranges = self.ranges
        if ranges is None:
            ranges = (DEFAULT_SCORE_RANGE,) * len(self.names)
        ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        if len(ranges) != len(self.names):
            raise SchemaError(
                f"{len(self.names)} characteristics but {len(ranges)} ranges"
            )
        for name, (lo, hi) in zip(self.names, ranges):
            if not lo < hi:
                raise SchemaError(f"empty score range for {name}: ({lo}, {hi})")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "ranges", ranges)

    @property
    def size(self) -> int:
        return len(self.names)

    def check_values(self, values: np.ndarray) -> None:
        """Raise if a score vector does not fit this schema."""
        if values.shape != (self.size,):
            raise SchemaError(
                f"expected {self.size} scores, got shape {values.shape}"
            )
        lows = np.array([r[0] for r in self.ranges])
        highs = np.array([r[1] for r in self.ranges])
        if np.any(values < lows) or np.any(values > highs):
            bad = int(np.argmax((values < lows) | (values > highs)))
            raise DomainError(
                f"score {values[bad]} outside range {self.ranges[bad]} "
                f"for {self.names[bad]}"
            )


DEFAULT_SCHEMA = CharacteristicSchema()


@dataclass(frozen=True, eq=False)
class RatingVector:
    """One annotator's scores, stored as reals to admit predicted ratings."""

    values: np.ndarray
    schema: CharacteristicSchema = DEFAULT_SCHEMA

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1:
            raise SchemaError(f"rating vector must be 1-D, got {values.ndim}-D")
        self.schema.check_values(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class RatingSet:
    """The multiset of rating vectors attached to one patch.

    Weights, when present, record the per-annotation slice weights from
    patch preparation. They never enter the distance or the mean rating.
    """

    vectors: np.ndarray
    weights: np.ndarray | None = None
    schema: CharacteristicSchema = DEFAULT_SCHEMA

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=float)
        if vectors.ndim == 1:
            vectors = vectors.reshape(1, -1)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise DomainError("a rating set needs at least one rating")
        for row in vectors:
            self.schema.check_values(row)
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        if self.weights is not None:
            weights = np.array(self.weights, dtype=float)
            if weights.shape != (vectors.shape[0],):
                raise SchemaError(
                    f"{vectors.shape[0]} ratings but {weights.size} weights"
                )
            if np.any(weights < 0):
                raise DomainError("weights must be nonnegative")
            weights.setflags(write=False)
            object.__setattr__(self, "weights", weights)

    @classmethod
    def of(cls, ratings, weights=None, schema: CharacteristicSchema | None = None):
        """Build a set from RatingVector instances or raw rows."""
        if isinstance(ratings, RatingVector):
            ratings = [ratings]
        rows = []
        for r in ratings:
            if isinstance(r, RatingVector):
                if schema is None:
                    schema = r.schema
                elif r.schema != schema:
                    raise SchemaError("mixed schemas within one rating set")
                rows.append(r.values)
            else:
                rows.append(np.asarray(r, dtype=float))
        if not rows:
            raise DomainError("a rating set needs at least one rating")
        return cls(np.stack(rows), weights, schema or DEFAULT_SCHEMA)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    """Symmetric pairwise-distance table with a zero diagonal."""

    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise DomainError(f"distance matrix must be square, got {entries.shape}")
        if not np.array_equal(entries, entries.T):
            raise DomainError("distance matrix must be symmetric")
        if np.any(np.diagonal(entries) != 0.0):
            raise DomainError("distance matrix must have a zero diagonal")
        if np.any(entries < 0.0):
            raise DomainError("distances must be nonnegative")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def _cross_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs L2 distances between the rows of two score matrices."""
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def rating_l2(a: RatingVector, b: RatingVector) -> float:
    """Euclidean distance between two rating vectors."""
    if a.schema != b.schema:
        raise SchemaError("rating vectors use different schemas")
    diff = a.values - b.values
    return float(np.sqrt(np.sum(diff * diff, axis=-1)))


def set_distance(a: RatingSet, b: RatingSet) -> float:
    """Mean-of-minima distance between two rating sets.

    For every rating in ``a`` take the L2 distance to its nearest rating
    in ``b``; average those, do the same in the opposite direction, and
    average the two directions. Singleton sets reduce to ``rating_l2``.
    """
    if a.schema != b.schema:
        raise SchemaError("rating sets use different schemas")
    dists = _cross_l2(a.vectors, b.vectors)
    forward = dists.min(axis=1).mean()
    backward = dists.min(axis=0).mean()
    return float(0.5 * forward + 0.5 * backward)


def set_distance_matrix(sets: list[RatingSet]) -> DistanceMatrix:
    """Pairwise set distances for a collection of patches.

    The computation is vectorized over row blocks but reduces in the
    same order as per-pair :func:`set_distance` calls, so the entries
    are bit-identical to the pairwise loop (and to any row-parallel
    evaluation).
    """
    if len(sets) < 2:
        raise DomainError("need at least two rating sets for a distance matrix")
    schema = sets[0].schema
    for s in sets[1:]:
        if s.schema != schema:
            raise SchemaError("rating sets use different schemas")
    n = len(sets)
    sizes = np.array([s.size for s in sets])
    n_max = int(sizes.max())
    dim = sets[0].vectors.shape[1]
    padded = np.zeros((n, n_max, dim))
    for i, s in enumerate(sets):
        padded[i, : s.size] = s.vectors
    valid = np.arange(n_max)[None, :] < sizes[:, None]

    # directed[i, j] = mean over i's ratings of the min distance into j
    directed = np.empty((n, n))
    row_bytes = n * n_max * n_max * dim * 8
    chunk = max(1, int(8e7 // max(row_bytes, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = padded[start:stop, None, :, None, :] - padded[None, :, None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        dist = np.where(valid[None, :, None, :], dist, np.inf)
        mins = dist.min(axis=3)
        summed = np.sum(np.where(valid[start:stop, None, :], mins, 0.0), axis=2)
        directed[start:stop] = summed / sizes[start:stop, None]
    out = 0.5 * directed + 0.5 * directed.T
    np.fill_diagonal(out, 0.0)
    return DistanceMatrix(out)


def mean_rating(rating_set: RatingSet) -> RatingVector:
    """Unweighted per-characteristic mean of a rating set."""
    return RatingVector(rating_set.vectors.mean(axis=0), rating_set.schema)


def malignancy_class(
    mean_malignancy: float,
    score_range: tuple[float, float] = DEFAULT_SCORE_RANGE,
) -> MalignancyClass:
    """Bin a continuous mean malignancy score into benign/unknown/malignant."""
    lo, hi = score_range
    if not lo <= mean_malignancy <= hi:
        raise DomainError(
            f"malignancy score {mean_malignancy} outside range ({lo}, {hi})"
        )
    if mean_malignancy <= BENIGN_MAX:
        return MalignancyClass.BENIGN
    if mean_malignancy >= MALIGNANT_MIN:
        return MalignancyClass.MALIGNANT
    return MalignancyClass.UNKNOWN
