"""Dataset records and their on-disk formats.

A dataset is a JSON Lines manifest, one record per patch, with the
numeric input stored out-of-line in a little-endian float32 blob file
referenced by relative path. Embedding exports use JSON Lines with one
``{"id", "vector"}`` object per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError, SchemaError
from .ratings import DEFAULT_SCHEMA, CharacteristicSchema, MalignancyClass, RatingSet

FEATURES_KIND = "features"
PATCH_KIND = "patch"

N_GROUPS = 5


@dataclass(frozen=True, eq=False)
class AnnotationRecord:
    """One rater's annotation of one nodule, with per-slice areas."""

    nodule_id: str
    annotation_id: str
    slices: tuple[tuple[int, float], ...]
    rating: np.ndarray

    def __post_init__(self):
        slices = tuple((int(i), float(a)) for i, a in self.slices)
        if not slices:
            raise DomainError(f"annotation {self.annotation_id} has no slices")
        indices = [i for i, _ in slices]
        if len(set(indices)) != len(indices):
            raise DomainError(f"annotation {self.annotation_id} repeats a slice index")
        if any(a <= 0 for _, a in slices):
            raise DomainError(f"annotation {self.annotation_id} has a nonpositive area")
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "rating", np.asarray(self.rating, dtype=float))


@dataclass(frozen=True, eq=False)
class PatchRecord:
    """One retrievable patch: input, group, rating set and class."""

    id: str
    group: int
    kind: str
    input: np.ndarray
    rating_set: RatingSet
    malignancy: MalignancyClass
    predicted_rating_set: RatingSet | None = None

    def __post_init__(self):
        if self.group not in range(N_GROUPS):
            raise DomainError(f"group must be 0..{N_GROUPS - 1}, got {self.group}")
        if self.kind not in (FEATURES_KIND, PATCH_KIND):
            raise DomainError(f"unknown input kind {self.kind!r}")
        arr = np.asarray(self.input, dtype=float)
        expected_ndim = 1 if self.kind == FEATURES_KIND else 2
        if arr.ndim != expected_ndim:
            raise SchemaError(
                f"{self.kind} input must be {expected_ndim}-D, got {arr.ndim}-D"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "input", arr)

    def with_predictions(self, predicted: RatingSet) -> "PatchRecord":
        return PatchRecord(self.id, self.group, self.kind, self.input,
                           self.rating_set, self.malignancy, predicted)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable record collection with schema."""

    records: tuple[PatchRecord, ...]
    schema: CharacteristicSchema = DEFAULT_SCHEMA

    def __post_init__(self):
        records = tuple(self.records)
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate patch ids in dataset")
        object.__setattr__(self, "records", records)

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, patch_id: str) -> PatchRecord:
        for r in self.records:
            if r.id == patch_id:
                return r
        raise DomainError(f"unknown patch id {patch_id!r}")

    def group_records(self, groups) -> list[PatchRecord]:
        wanted = {groups} if isinstance(groups, int) else set(groups)
        return [r for r in self.records if r.group in wanted]

    def inputs(self, records=None) -> np.ndarray:
        records = self.records if records is None else records
        return np.stack([r.input for r in records])

    def rating_sets(self, records=None) -> list[RatingSet]:
        records = self.records if records is None else records
        return [r.rating_set for r in records]


def write_blob(path, array: np.ndarray) -> None:
    """Row-major little-endian float32 dump."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_blob(path, shape) -> np.ndarray:
    expected = int(np.prod(shape))
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != expected * 4:
        raise FormatError(
            f"{path}: expected {expected * 4} bytes for shape {tuple(shape)}, "
            f"got {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(float).reshape(shape)


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest.jsonl plus one blob per record; returns manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for record in dataset.records:
            ref = f"blobs/{record.id}.f32"
            write_blob(out / ref, record.input)
            entry: dict = {
                "id": record.id,
                "group": record.group,
                "input": {"kind": record.kind, "ref": ref},
                "ratings": [list(map(float, row)) for row in record.rating_set.vectors],
                "malignancy_class": record.malignancy.value,
            }
            if record.kind == FEATURES_KIND:
                entry["input"]["dim"] = int(record.input.shape[0])
            else:
                entry["input"]["shape"] = list(record.input.shape)
            if record.rating_set.weights is not None:
                entry["weights"] = [float(w) for w in record.rating_set.weights]
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest


def load_dataset(manifest_path, schema: CharacteristicSchema = DEFAULT_SCHEMA) -> Dataset:
    """Read a manifest and its blobs back into a Dataset."""
    manifest = Path(manifest_path)
    base = manifest.parent
    records = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{manifest}:{line_no}: bad JSON: {exc}") from exc
            try:
                kind = entry["input"]["kind"]
                if kind == FEATURES_KIND:
                    shape = (int(entry["input"]["dim"]),)
                elif kind == PATCH_KIND:
                    shape = tuple(int(s) for s in entry["input"]["shape"])
                else:
                    raise FormatError(
                        f"{manifest}:{line_no}: unknown input kind {kind!r}"
                    )
                array = read_blob(base / entry["input"]["ref"], shape)
                rating_set = RatingSet(
                    np.asarray(entry["ratings"], dtype=float),
                    np.asarray(entry["weights"], dtype=float) if "weights" in entry else None,
                    schema,
                )
                records.append(PatchRecord(
                    id=str(entry["id"]),
                    group=int(entry["group"]),
                    kind=kind,
                    input=array,
                    rating_set=rating_set,
                    malignancy=MalignancyClass(entry["malignancy_class"]),
                ))
            except (KeyError, ValueError, DomainError, SchemaError) as exc:
                raise FormatError(f"{manifest}:{line_no}: {exc}") from exc
    return Dataset(tuple(records), schema)


def write_embeddings(path, ids, vectors: np.ndarray) -> None:
    """JSON Lines embedding export: one {"id", "vector"} object per line."""
    vectors = np.asarray(vectors, dtype=float)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for item_id, vec in zip(ids, vectors):
            fh.write(json.dumps(
                {"id": item_id, "vector": [float(v) for v in vec]}
            ) + "\n")


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    """Read an embedding export; enforces unique ids and a uniform dimension."""
    ids: list[str] = []
    seen: set[str] = set()
    rows: list[np.ndarray] = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                item_id = str(entry["id"])
                vector = np.asarray(entry["vector"], dtype=float)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
            if vector.ndim != 1:
                raise FormatError(f"{path}:{line_no}: vector must be 1-D")
            if dim is None:
                dim = vector.shape[0]
            elif vector.shape[0] != dim:
                raise FormatError(
                    f"{path}:{line_no}: dimension {vector.shape[0]} differs "
                    f"from first vector's {dim}"
                )
            if item_id in seen:
                raise FormatError(f"{path}:{line_no}: duplicate id {item_id!r}")
            seen.add(item_id)
            ids.append(item_id)
            rows.append(vector)
    if not rows:
        raise FormatError(f"{path}: no embeddings found")
    return ids, np.stack(rows)
