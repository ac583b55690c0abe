"""Dataset preparation and experiment orchestration.

Covers patch preparation helpers (representative-slice selection,
intensity windowing, stratified group splits), a synthetic dataset
generator for desk-scale experiments, and the three-step protocol that
compares supervised, semi-supervised and imported-embedding retrieval
over ten fixed cross-validation configurations.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .annotations import DEFAULT_RIDGE
from .data import (
    FEATURES_KIND,
    N_GROUPS,
    AnnotationRecord,
    Dataset,
    PatchRecord,
    read_embeddings,
)
from .errors import ConfigError, DomainError, FormatError
from .model import (
    ModelConfig,
    embedding_distance_matrix,
    init_model,
    predict_ratings,
)
from .ratings import (
    DEFAULT_SCHEMA,
    CharacteristicSchema,
    MalignancyClass,
    RatingSet,
    malignancy_class,
    set_distance_matrix,
)
from .retrieval import build_index, hubness_index, rating_correlation
from .training import TrainData, TrainSchedule, train

HU_WINDOW = (-300.0, 700.0)

SUPERVISED = "supervised"
SEMI_SUPERVISED = "semi_supervised"
IMPORTED_BASELINE = "imported_baseline"
REGIMES = (SUPERVISED, SEMI_SUPERVISED, IMPORTED_BASELINE)

VALIDATION_CONFIG_IDS = frozenset({0, 1, 3, 4, 7})
TEST_CONFIG_IDS = frozenset({2, 5, 6, 8, 9})


# -- patch preparation -------------------------------------------------------


def select_representative_slice(annotations: list[AnnotationRecord]) -> int:
    """Pick the slice that best represents a nodule across annotations.

    Within each annotation, every slice is weighted by its area relative
    to that annotation's largest slice; weights are summed over
    annotations and the slice with the largest total wins, ties going to
    the lower slice index.
    """
    if not annotations:
        raise DomainError("no annotations given")
    totals: dict[int, float] = {}
    for ann in annotations:
        max_area = max(area for _, area in ann.slices)
        for index, area in ann.slices:
            totals[index] = totals.get(index, 0.0) + area / max_area
    best = max(sorted(totals), key=lambda i: (totals[i], -i))
    return best


def normalize_patch(hounsfield: np.ndarray) -> np.ndarray:
    """Clamp to the HU window [-300, 700] and scale linearly to [0, 1]."""
    lo, hi = HU_WINDOW
    arr = np.asarray(hounsfield, dtype=float)
    return (np.clip(arr, lo, hi) - lo) / (hi - lo)


def split_groups(classes: list[MalignancyClass], n_groups: int = N_GROUPS,
                 seed: int = 0) -> np.ndarray:
    """Stratified group assignment, deterministic per seed.

    Items are dealt round-robin within each malignancy class, with the
    starting group rotated between classes so totals stay balanced; each
    group's per-class count lands within one item of an even split.
    """
    n = len(classes)
    if n < n_groups:
        raise DomainError(f"cannot split {n} items into {n_groups} groups")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=int)
    offset = 0
    for cls in MalignancyClass:
        members = np.flatnonzero([c == cls for c in classes])
        rng.shuffle(members)
        for j, idx in enumerate(members):
            assignment[idx] = (offset + j) % n_groups
        offset += len(members)
    return assignment


# -- synthetic data ----------------------------------------------------------

# Gain of the latent-to-feature nonlinearity.
_FEATURE_GAIN = 1.5
# The additive feature noise has a low-rank correlated part: a few
# high-amplitude random directions dominate the raw feature distances,
# so an untrained network inherits near-meaningless geometry, while a
# trained one can project the clutter away and recover the scores.
_CLUTTER_DIMS = 4
_CLUTTER_SCALE = 6.0


def generate_synthetic(n_items: int, schema: CharacteristicSchema = DEFAULT_SCHEMA,
                       rating_noise: float = 0.3, feature_noise: float = 0.05,
                       clutter_scale: float = _CLUTTER_SCALE,
                       feature_dim: int = 32, rater_range: tuple[int, int] = (1, 4),
                       seed: int = 0) -> Dataset:
    """Build a fully synthetic feature-vector dataset.

    Each item has a latent score vector drawn uniformly over the schema
    ranges; its rating set holds one to four noisy rater copies (clamped
    to the schema) and its input is a fixed seeded random linear map of
    the latent scores through a saturating nonlinearity, plus noise
    (white at ``feature_noise`` std, plus the correlated clutter part
    scaled by ``clutter_scale``).
    """
    if n_items < 10:
        raise DomainError(f"need at least 10 items, got {n_items}")
    if rater_range[0] < 1 or rater_range[0] > rater_range[1]:
        raise DomainError(f"bad rater range {rater_range}")
    rng = np.random.default_rng(seed)
    d = schema.size
    lows = np.array([r[0] for r in schema.ranges])
    highs = np.array([r[1] for r in schema.ranges])

    latents = rng.uniform(lows, highs, size=(n_items, d))
    mix = rng.normal(scale=1.0 / np.sqrt(d), size=(d, feature_dim))
    bias = rng.uniform(-1.0, 1.0, size=feature_dim)
    clutter = np.linalg.qr(rng.normal(size=(feature_dim, _CLUTTER_DIMS)))[0]

    scaled = 2.0 * (latents - lows) / (highs - lows) - 1.0
    features = np.tanh(_FEATURE_GAIN * (scaled @ mix + bias))
    features = features + clutter_scale * (
        rng.normal(size=(n_items, _CLUTTER_DIMS)) @ clutter.T
    )
    features = features + rng.normal(scale=feature_noise, size=features.shape)

    rater_counts = rng.integers(rater_range[0], rater_range[1] + 1, size=n_items)
    rating_sets = []
    for i in range(n_items):
        votes = latents[i] + rng.normal(scale=rating_noise, size=(rater_counts[i], d))
        votes = np.clip(votes, lows, highs)
        rating_sets.append(RatingSet(votes, None, schema))

    malignancy_idx = d - 1
    classes = [
        malignancy_class(float(s.vectors[:, malignancy_idx].mean()),
                         schema.ranges[malignancy_idx])
        for s in rating_sets
    ]
    groups = split_groups(classes, N_GROUPS, seed)
    width = len(str(n_items - 1))
    records = tuple(
        PatchRecord(
            id=f"item_{i:0{width}d}",
            group=int(groups[i]),
            kind=FEATURES_KIND,
            input=features[i],
            rating_set=rating_sets[i],
            malignancy=classes[i],
        )
        for i in range(n_items)
    )
    return Dataset(records, schema)


# -- cross-validation configurations ----------------------------------------


@dataclass(frozen=True)
class CVConfig:
    """Group roles for one cross-validation configuration."""

    config_id: int
    prediction_train: tuple[int, int]
    prediction_valid: tuple[int, int]
    test_group: int
    retrieval_train: tuple[int, int]

    @property
    def role(self) -> str:
        return "validation" if self.config_id in VALIDATION_CONFIG_IDS else "test"


def _cv(config_id, pred_train, pred_valid, test_group):
    return CVConfig(config_id, pred_train, pred_valid, test_group,
                    retrieval_train=pred_valid)


CV_CONFIGS: tuple[CVConfig, ...] = (
    _cv(0, (0, 1), (2, 3), 4),
    _cv(1, (0, 2), (1, 4), 3),
    _cv(2, (0, 3), (1, 2), 4),
    _cv(3, (0, 4), (1, 3), 2),
    _cv(4, (1, 2), (3, 4), 0),
    _cv(5, (1, 3), (2, 4), 0),
    _cv(6, (1, 4), (0, 3), 2),
    _cv(7, (2, 3), (0, 4), 1),
    _cv(8, (2, 4), (0, 1), 3),
    _cv(9, (3, 4), (0, 2), 1),
)


def validate_cv_configs(configs: tuple[CVConfig, ...] = CV_CONFIGS) -> None:
    """Startup validation of the configuration table."""
    if [c.config_id for c in configs] != list(range(10)):
        raise ConfigError("configuration ids must be 0..9 in order")
    for c in configs:
        groups = (*c.prediction_train, *c.prediction_valid, c.test_group)
        if sorted(groups) != list(range(N_GROUPS)):
            raise ConfigError(
                f"configuration {c.config_id} does not partition the groups: {groups}"
            )
        if c.retrieval_train != c.prediction_valid:
            raise ConfigError(
                f"configuration {c.config_id}: retrieval training groups must "
                f"equal the prediction validation groups"
            )
    roles = {c.config_id for c in configs if c.role == "validation"}
    if roles != VALIDATION_CONFIG_IDS:
        raise ConfigError(f"validation role set wrong: {sorted(roles)}")


def cv_config(config_id: int) -> CVConfig:
    if config_id not in range(10):
        raise ConfigError(f"configuration id must be 0..9, got {config_id}")
    return CV_CONFIGS[config_id]


# the table is literal data; fail fast on import if it was edited badly
validate_cv_configs()


# -- experiments -------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative description of one experiment run."""

    regime: str
    model: ModelConfig
    prediction_schedule: TrainSchedule
    retrieval_schedule: TrainSchedule
    configs: tuple[int, ...]
    seed: int = 0
    embeddings_path: str | None = None
    mahalanobis_ridge: float = DEFAULT_RIDGE

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(
                f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}"
            )
        for cid in self.configs:
            if cid not in range(10):
                raise ConfigError(f"configuration id must be 0..9, got {cid}")
        if self.regime == IMPORTED_BASELINE and not self.embeddings_path:
            raise ConfigError("imported_baseline requires an embeddings file")
        object.__setattr__(self, "configs", tuple(self.configs))


def _derived_seed(seed: int, config_id: int, salt: int) -> int:
    state = np.random.SeedSequence([seed, config_id, salt]).generate_state(2)
    return int(state[0]) * (1 << 32) + int(state[1])


def _train_data(dataset: Dataset, groups, label_sets: dict[str, RatingSet] | None = None) -> TrainData:
    records = dataset.group_records(groups)
    if not records:
        raise DomainError(f"no records in groups {groups}")
    if label_sets is None:
        sets = [r.rating_set for r in records]
    else:
        missing = [r.id for r in records if r.id not in label_sets]
        if missing:
            raise DomainError(
                f"missing predicted ratings for {len(missing)} items "
                f"(e.g. {missing[0]!r}); run the prediction step first"
            )
        sets = [label_sets[r.id] for r in records]
    return TrainData(dataset.inputs(records), tuple(sets))


@dataclass
class PredictionStepResult:
    predictions: dict[str, RatingSet]
    selected_epoch: int
    history: list


def run_prediction_step(cv: CVConfig, experiment: ExperimentSpec,
                        dataset: Dataset) -> PredictionStepResult:
    """Train the score regressor and predict ratings for the held-out groups.

    The regressor trains on the two prediction-training groups; the
    epoch with the lowest validation regression loss is kept and used to
    predict singleton rating sets for the validation and test groups.
    """
    train_data = _train_data(dataset, cv.prediction_train)
    valid_records = dataset.group_records(cv.prediction_valid)
    valid_data = TrainData(dataset.inputs(valid_records),
                           tuple(r.rating_set for r in valid_records))
    seed = _derived_seed(experiment.seed, cv.config_id, 1)
    model = init_model(replace(experiment.model, seed=seed))
    schedule = replace(experiment.prediction_schedule, seed=seed)
    result = train(model, train_data, schedule, validation=valid_data,
                   select_epoch_by_val_loss=True)

    predict_records = dataset.group_records(
        (*cv.prediction_valid, cv.test_group)
    )
    vectors = predict_ratings(model, dataset.inputs(predict_records), dataset.schema)
    predictions = {
        record.id: RatingSet.of([vector], schema=dataset.schema)
        for record, vector in zip(predict_records, vectors)
    }
    return PredictionStepResult(predictions, result.selected_epoch or 0,
                                result.history)


TRUE_RATINGS = "true_ratings"
PREDICTED_RATINGS = "predicted_ratings"


@dataclass
class RetrievalStepResult:
    correlation: float
    hubness: float
    test_ids: tuple[str, ...]
    test_embeddings: np.ndarray
    history: list


def run_retrieval_step(cv: CVConfig, experiment: ExperimentSpec, dataset: Dataset,
                       label_source: str,
                       predictions: dict[str, RatingSet] | None = None) -> RetrievalStepResult:
    """Train the retrieval embedding and evaluate it on the test group.

    ``label_source`` picks the rating sets used as the training target;
    metrics on the test group always use the true rating distances. The
    test group never contributes a training item, asserted on ids.
    """
    if label_source not in (TRUE_RATINGS, PREDICTED_RATINGS):
        raise ConfigError(f"unknown label source {label_source!r}")
    label_sets = None
    if label_source == PREDICTED_RATINGS:
        if predictions is None:
            raise DomainError(
                "predicted ratings unavailable; run the prediction step first"
            )
        label_sets = predictions
    train_records = dataset.group_records(cv.retrieval_train)
    test_records = dataset.group_records(cv.test_group)
    train_ids = {r.id for r in train_records}
    test_ids = {r.id for r in test_records}
    overlap = train_ids & test_ids
    if overlap:
        raise DomainError(f"test items leaked into training: {sorted(overlap)[:3]}")

    train_data = _train_data(dataset, cv.retrieval_train, label_sets)
    seed = _derived_seed(experiment.seed, cv.config_id, 2)
    model = init_model(replace(experiment.model, seed=seed))
    schedule = replace(experiment.retrieval_schedule, seed=seed)
    result = train(model, train_data, schedule)

    emb = model.embed_batch(dataset.inputs(test_records))
    true_dm = set_distance_matrix([r.rating_set for r in test_records])
    correlation = rating_correlation(embedding_distance_matrix(emb), true_dm.entries)
    index = build_index([r.id for r in test_records], emb)
    hubness = hubness_index(index)
    return RetrievalStepResult(correlation, hubness,
                               tuple(r.id for r in test_records), emb,
                               result.history)


def import_embeddings(path, dataset: Dataset):
    """Load an embedding export, normalize it and score it on true ratings.

    The file's ids must be unique and form a subset of the dataset ids.
    Returns the built index plus a metrics dict over the imported items.
    """
    ids, vectors = read_embeddings(path)
    known = set(dataset.ids())
    unknown = [i for i in ids if i not in known]
    if unknown:
        raise FormatError(
            f"embedding file references unknown ids (e.g. {unknown[0]!r})"
        )
    norms = np.sqrt(np.sum(vectors * vectors, axis=1, keepdims=True))
    if np.any(norms[:, 0] < 1e-12):
        raise FormatError("embedding file contains a zero vector")
    index = build_index(ids, vectors / norms)
    sets = [dataset.by_id(i).rating_set for i in ids]
    true_dm = set_distance_matrix(sets)
    metrics = {
        "correlation": rating_correlation(
            embedding_distance_matrix(index.vectors), true_dm.entries
        ),
        "hubness": hubness_index(index),
    }
    return index, metrics


@dataclass(frozen=True)
class ConfigResult:
    config_id: int
    regime: str
    correlation: float
    hubness: float
    epoch: int


@dataclass
class ResultSummary:
    mean_correlation: float
    mean_hubness: float
    results: tuple[ConfigResult, ...]


def aggregate_results(results: list[ConfigResult], role: str | None = None) -> ResultSummary:
    """Mean correlation and hubness over one role's configurations."""
    if role is not None:
        wanted = VALIDATION_CONFIG_IDS if role == "validation" else TEST_CONFIG_IDS
        results = [r for r in results if r.config_id in wanted]
    if not results:
        raise DomainError("no configuration results to aggregate")
    return ResultSummary(
        mean_correlation=float(np.mean([r.correlation for r in results])),
        mean_hubness=float(np.mean([r.hubness for r in results])),
        results=tuple(sorted(results, key=lambda r: (r.config_id, r.regime))),
    )


def run_config(experiment: ExperimentSpec, dataset: Dataset, config_id: int) -> list[ConfigResult]:
    """Run one configuration under the experiment's regime."""
    validate_cv_configs()
    cv = cv_config(config_id)
    rows: list[ConfigResult] = []
    if experiment.regime == IMPORTED_BASELINE:
        ids, vectors = read_embeddings(experiment.embeddings_path)
        by_id = dict(zip(ids, vectors))
        test_records = dataset.group_records(cv.test_group)
        missing = [r.id for r in test_records if r.id not in by_id]
        if missing:
            raise FormatError(
                f"embeddings missing for test items (e.g. {missing[0]!r})"
            )
        sub = np.stack([by_id[r.id] for r in test_records])
        norms = np.sqrt(np.sum(sub * sub, axis=1, keepdims=True))
        if np.any(norms[:, 0] < 1e-12):
            raise FormatError("embedding file contains a zero vector")
        sub = sub / norms
        true_dm = set_distance_matrix([r.rating_set for r in test_records])
        index = build_index([r.id for r in test_records], sub)
        rows.append(ConfigResult(
            config_id, IMPORTED_BASELINE,
            rating_correlation(embedding_distance_matrix(sub), true_dm.entries),
            hubness_index(index), 0,
        ))
        return rows

    supervised = run_retrieval_step(cv, experiment, dataset, TRUE_RATINGS)
    retrieval_epochs = experiment.retrieval_schedule.total_epochs
    rows.append(ConfigResult(config_id, SUPERVISED, supervised.correlation,
                             supervised.hubness, retrieval_epochs))
    if experiment.regime == SEMI_SUPERVISED:
        prediction = run_prediction_step(cv, experiment, dataset)
        semi = run_retrieval_step(cv, experiment, dataset, PREDICTED_RATINGS,
                                  prediction.predictions)
        rows.append(ConfigResult(config_id, SEMI_SUPERVISED, semi.correlation,
                                 semi.hubness, prediction.selected_epoch))
    return rows


def _run_config_worker(args):
    experiment, dataset, config_id = args
    return run_config(experiment, dataset, config_id)


def run_experiment(experiment: ExperimentSpec, dataset: Dataset, jobs: int = 1) -> list[ConfigResult]:
    """Run every configuration the experiment selects, optionally in parallel.

    Configurations share only read-only data, so workers are
    independent; results are merged in configuration order and identical
    to a sequential run.
    """
    if not experiment.configs:
        raise ConfigError("no configurations selected")
    if jobs <= 1 or len(experiment.configs) == 1:
        nested = [run_config(experiment, dataset, cid) for cid in experiment.configs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            nested = list(pool.map(
                _run_config_worker,
                [(experiment, dataset, cid) for cid in experiment.configs],
            ))
    rows = [row for group in nested for row in group]
    return sorted(rows, key=lambda r: (r.config_id, r.regime))
