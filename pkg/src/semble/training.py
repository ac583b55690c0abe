"""Training schedules and the gradient-descent loop.

Four schedule modes cover the network roles: score regression only,
similarity only, serial fine-tuning (regression first, similarity
second) and the staged multi-task blend whose step weights are
(0.9, 0.1), (0.5, 0.5), (0.0, 0.1). Optimization is plain seeded SGD;
given the same seed, data and schedule the run is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .errors import ConfigError, DegenerateInputError, SchemaError
from .model import (
    EmbeddingModel,
    distance_matrix_backward,
    embedding_distance_matrix,
)
from .ratings import RatingSet, set_distance, set_distance_matrix

REGRESSION_ONLY = "regression_only"
SIMILARITY_ONLY = "similarity_only"
TWO_STEP_FINETUNE = "two_step_finetune"
MULTI_TASK = "multi_task"

SCHEDULE_MODES = (REGRESSION_ONLY, SIMILARITY_ONLY, TWO_STEP_FINETUNE, MULTI_TASK)

# Staged multi-task weights, encoded verbatim: the last step deliberately
# keeps only a small similarity weight and no regression weight.
MULTI_TASK_WEIGHTS = ((0.9, 0.1), (0.5, 0.5), (0.0, 0.1))

SIMILARITY_LOSSES = ("dm_logcosh", "dm_pearson", "dm_ranked_pearson", "dm_kl", "siamese")

# Tail batches smaller than this are dropped; distance-matrix losses are
# meaningless on one or two items.
_MIN_BATCH = 4


@dataclass(frozen=True)
class ScheduleStep:
    w_reg: float
    w_sim: float
    epochs: int

    def __post_init__(self):
        if self.w_reg < 0 or self.w_sim < 0:
            raise ConfigError(f"negative loss weight in step {self}")
        if self.epochs < 0:
            raise ConfigError(f"negative epoch count in step {self}")


@dataclass(frozen=True)
class TrainSchedule:
    """Declarative description of one training run."""

    mode: str
    steps: tuple[ScheduleStep, ...]
    similarity_loss: str = "dm_kl"
    negate_exponent: bool = False
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SCHEDULE_MODES:
            raise ConfigError(f"unknown schedule mode: {self.mode!r}")
        if self.similarity_loss not in SIMILARITY_LOSSES:
            raise ConfigError(
                f"unknown similarity loss {self.similarity_loss!r}; "
                f"choose from {', '.join(SIMILARITY_LOSSES)}"
            )
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive: {self.learning_rate}")
        if self.batch_size < _MIN_BATCH:
            raise ConfigError(f"batch size must be >= {_MIN_BATCH}")

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.steps)

    @classmethod
    def regression_only(cls, epochs: int, **kw):
        return cls(REGRESSION_ONLY, (ScheduleStep(1.0, 0.0, epochs),), **kw)

    @classmethod
    def similarity_only(cls, epochs: int, similarity_loss: str = "dm_kl", **kw):
        return cls(SIMILARITY_ONLY, (ScheduleStep(0.0, 1.0, epochs),),
                   similarity_loss=similarity_loss, **kw)

    @classmethod
    def two_step_finetune(cls, epochs: tuple[int, int],
                          similarity_loss: str = "dm_kl", **kw):
        steps = (ScheduleStep(1.0, 0.0, epochs[0]), ScheduleStep(0.0, 1.0, epochs[1]))
        return cls(TWO_STEP_FINETUNE, steps, similarity_loss=similarity_loss, **kw)

    @classmethod
    def multi_task(cls, epochs: tuple[int, int, int],
                   similarity_loss: str = "dm_kl", **kw):
        steps = tuple(
            ScheduleStep(w_reg, w_sim, e)
            for (w_reg, w_sim), e in zip(MULTI_TASK_WEIGHTS, epochs)
        )
        return cls(MULTI_TASK, steps, similarity_loss=similarity_loss, **kw)


@dataclass(frozen=True)
class TrainData:
    """Inputs plus the rating sets used as the label source."""

    inputs: np.ndarray
    rating_sets: tuple[RatingSet, ...]

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.shape[0] != len(self.rating_sets):
            raise SchemaError(
                f"{inputs.shape[0]} inputs but {len(self.rating_sets)} rating sets"
            )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "rating_sets", tuple(self.rating_sets))

    def __len__(self) -> int:
        return len(self.rating_sets)

    def mean_ratings(self) -> np.ndarray:
        return np.stack([s.vectors.mean(axis=0) for s in self.rating_sets])


@dataclass
class EpochRecord:
    epoch: int
    step_index: int
    w_reg: float
    w_sim: float
    train_loss: float
    val_loss: float
    val_correlation: float
    skipped_batches: int


@dataclass
class TrainResult:
    model: EmbeddingModel
    history: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None

    @property
    def total_skipped(self) -> int:
        return sum(r.skipped_batches for r in self.history)


def _similarity_loss_and_grad(schedule: TrainSchedule, emb: np.ndarray,
                              sets: list[RatingSet]):
    """Similarity loss value plus its gradient at the embeddings."""
    name = schedule.similarity_loss
    if name == "siamese":
        half = emb.shape[0] // 2
        a, b = emb[:half], emb[half:2 * half]
        d_true = np.array([
            set_distance(sets[i], sets[half + i]) for i in range(half)
        ])
        res = losses.siamese_distance_loss(a, b, d_true)
        grad = np.zeros_like(emb)
        grad[:half] = res.gradient[0]
        grad[half:2 * half] = res.gradient[1]
        return res.value, grad
    target = set_distance_matrix(sets).entries
    predicted = embedding_distance_matrix(emb)
    if name == "dm_logcosh":
        res = losses.dm_logcosh(predicted, target)
    elif name == "dm_pearson":
        res = losses.dm_pearson(predicted, target)
    elif name == "dm_ranked_pearson":
        res = losses.dm_ranked_pearson(predicted, target)
    else:
        res = losses.dm_kl(predicted, target, negate_exponent=schedule.negate_exponent)
    grad = distance_matrix_backward(res.gradient, emb, predicted)
    return res.value, grad


def _evaluate_validation(model: EmbeddingModel, validation: TrainData,
                         val_target_dm: np.ndarray | None):
    from .retrieval import rating_correlation

    emb = model.embed_batch(validation.inputs)
    pred = model.rating_batch(emb)
    val_loss = losses.logcosh_regression(pred, validation.mean_ratings()).value
    val_corr = float("nan")
    if val_target_dm is not None and len(validation) >= 3:
        try:
            val_corr = rating_correlation(
                embedding_distance_matrix(emb), val_target_dm
            )
        except DegenerateInputError:
            pass
    return val_loss, val_corr


def train(model: EmbeddingModel, data: TrainData, schedule: TrainSchedule,
          validation: TrainData | None = None,
          select_epoch_by_val_loss: bool = False) -> TrainResult:
    """Run the schedule over seeded shuffled batches of ``data``.

    Batches whose target distance matrix has a constant row under a
    correlation loss are skipped and counted in the epoch record. With
    ``select_epoch_by_val_loss`` the model is rolled back to the epoch
    with the lowest validation regression loss (epoch 0, the untrained
    state, included).
    """
    rng = np.random.default_rng(schedule.seed)
    n = len(data)
    targets = data.mean_ratings()
    val_target_dm = None
    if validation is not None and len(validation) >= 3:
        val_target_dm = set_distance_matrix(list(validation.rating_sets)).entries

    result = TrainResult(model)
    best_epoch = 0
    best_val = float("inf")
    best_params = None
    if validation is not None:
        val_loss, val_corr = _evaluate_validation(model, validation, val_target_dm)
        result.history.append(EpochRecord(0, -1, float("nan"), float("nan"),
                                          float("nan"), val_loss, val_corr, 0))
        best_val = val_loss
        if select_epoch_by_val_loss:
            best_params = model.copy_params()

    epoch = 0
    for step_index, step in enumerate(schedule.steps):
        for _ in range(step.epochs):
            epoch += 1
            order = rng.permutation(n)
            batch_losses = []
            skipped = 0
            for start in range(0, n, schedule.batch_size):
                idx = order[start:start + schedule.batch_size]
                if idx.size < _MIN_BATCH:
                    continue
                xb = data.inputs[idx]
                sets_b = [data.rating_sets[i] for i in idx]
                try:
                    emb, cache = model.embed_batch(xb, want_cache=True)
                    value = 0.0
                    grad_emb = None
                    grad_rating = None
                    if step.w_sim > 0:
                        sim_value, sim_grad = _similarity_loss_and_grad(
                            schedule, emb, sets_b
                        )
                        value += step.w_sim * sim_value
                        grad_emb = step.w_sim * sim_grad
                    if step.w_reg > 0:
                        pred = model.rating_batch(emb)
                        reg = losses.logcosh_regression(pred, targets[idx])
                        value += step.w_reg * reg.value
                        grad_rating = step.w_reg * reg.gradient
                    grads = model.backward(cache, grad_emb, grad_rating)
                except DegenerateInputError:
                    skipped += 1
                    continue
                model.apply_gradients(grads, schedule.learning_rate)
                batch_losses.append(value)
            train_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
            val_loss = float("nan")
            val_corr = float("nan")
            if validation is not None:
                val_loss, val_corr = _evaluate_validation(
                    model, validation, val_target_dm
                )
                if val_loss < best_val:
                    best_val = val_loss
                    best_epoch = epoch
                    if select_epoch_by_val_loss:
                        best_params = model.copy_params()
            result.history.append(EpochRecord(
                epoch, step_index, step.w_reg, step.w_sim,
                train_loss, val_loss, val_corr, skipped,
            ))
    if select_epoch_by_val_loss and best_params is not None:
        model.set_params(best_params)
        result.selected_epoch = best_epoch
    return result
