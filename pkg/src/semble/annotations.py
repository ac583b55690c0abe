"""Evaluation of predicted ratings against multi-rater ground truth.

Per characteristic: RMSE against the mean rating, Pearson correlation
(absent when a side is constant), normalized score entropy and an
inter-observer RMSE estimate from the within-item rater spread. The
overall Mahalanobis distance places each prediction relative to its
item's rater distribution; items with fewer than four ratings are
skipped, since the rater covariance is meaningless below that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotEnoughRatersError, SchemaError
from .ratings import DEFAULT_SCHEMA, CharacteristicSchema, RatingSet, RatingVector

MIN_RATERS = 4
DEFAULT_RIDGE = 1e-3


def _prediction_matrix(predicted) -> np.ndarray:
    rows = [p.values if isinstance(p, RatingVector) else np.asarray(p, dtype=float)
            for p in predicted]
    return np.stack(rows)


def _target_matrix(truth: list[RatingSet]) -> np.ndarray:
    return np.stack([s.vectors.mean(axis=0) for s in truth])


def per_param_rmse(predicted, truth: list[RatingSet]) -> np.ndarray:
    """Root-mean-squared error against the mean rating, per characteristic."""
    pred = _prediction_matrix(predicted)
    if pred.shape[0] != len(truth):
        raise SchemaError(f"{pred.shape[0]} predictions for {len(truth)} items")
    target = _target_matrix(truth)
    if pred.shape != target.shape:
        raise SchemaError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return np.sqrt(np.mean((pred - target) ** 2, axis=0))


def per_param_correlation(predicted, truth: list[RatingSet]) -> list[float | None]:
    """Pearson correlation per characteristic; None when a side is constant."""
    pred = _prediction_matrix(predicted)
    if pred.shape[0] != len(truth):
        raise SchemaError(f"{pred.shape[0]} predictions for {len(truth)} items")
    target = _target_matrix(truth)
    out: list[float | None] = []
    for c in range(pred.shape[1]):
        x = pred[:, c] - pred[:, c].mean()
        y = target[:, c] - target[:, c].mean()
        sxx = float(np.sum(x * x))
        syy = float(np.sum(y * y))
        if sxx <= 0.0 or syy <= 0.0:
            out.append(None)
        else:
            out.append(float(np.sum(x * y) / np.sqrt(sxx * syy)))
    return out


def mahalanobis_to_raters(predicted, raters: RatingSet,
                          ridge: float = DEFAULT_RIDGE) -> float:
    """Covariance-whitened distance from a prediction to the rater votes.

    The rater covariance from a handful of votes is singular in nine
    dimensions, so a ridge term regularizes the inversion; the ridge in
    use is reported alongside every aggregate.
    """
    if raters.size < MIN_RATERS:
        raise NotEnoughRatersError(
            f"need at least {MIN_RATERS} ratings, got {raters.size}"
        )
    pred = predicted.values if isinstance(predicted, RatingVector) else np.asarray(predicted, dtype=float)
    votes = raters.vectors
    if pred.shape != (votes.shape[1],):
        raise SchemaError(f"prediction shape {pred.shape} vs {votes.shape[1]} characteristics")
    mu = votes.mean(axis=0)
    centered = votes - mu
    cov = centered.T @ centered / votes.shape[0]
    cov = cov + ridge * np.eye(cov.shape[0])
    delta = pred - mu
    solved = np.linalg.solve(cov, delta)
    return float(np.sqrt(max(float(delta @ solved), 0.0)))


def dataset_mahalanobis(predicted, truth: list[RatingSet],
                        ridge: float = DEFAULT_RIDGE) -> tuple[float, int, int]:
    """Mean Mahalanobis over qualifying items; returns (mean, used, skipped)."""
    pred = _prediction_matrix(predicted)
    if pred.shape[0] != len(truth):
        raise SchemaError(f"{pred.shape[0]} predictions for {len(truth)} items")
    values = []
    skipped = 0
    for row, raters in zip(pred, truth):
        try:
            values.append(mahalanobis_to_raters(row, raters, ridge))
        except NotEnoughRatersError:
            skipped += 1
    mean = float(np.mean(values)) if values else float("nan")
    return mean, len(values), skipped


def param_entropy(truth: list[RatingSet], characteristic: int,
                  schema: CharacteristicSchema = DEFAULT_SCHEMA) -> float:
    """Normalized Shannon entropy of the rounded score histogram.

    Scores are rounded to the integer levels of the characteristic's
    schema range; entropy is divided by log(#levels) so a uniform
    distribution scores 1 and a constant one scores 0.
    """
    if not truth:
        raise DomainError("empty dataset")
    lo, hi = schema.ranges[characteristic]
    levels = np.arange(int(np.ceil(lo)), int(np.floor(hi)) + 1)
    if levels.size < 2:
        raise DomainError(f"characteristic {characteristic} has fewer than 2 levels")
    scores = np.concatenate([s.vectors[:, characteristic] for s in truth])
    rounded = np.clip(np.rint(scores), levels[0], levels[-1]).astype(int)
    hist = np.bincount(rounded - levels[0], minlength=levels.size)
    p = hist / hist.sum()
    nonzero = p[p > 0]
    entropy = max(-float(np.sum(nonzero * np.log(nonzero))), 0.0)
    return entropy / float(np.log(levels.size))


def inter_observer_rmse(truth: list[RatingSet]) -> np.ndarray:
    """Root of the mean within-item rater variance, per characteristic.

    Only items with at least four ratings qualify; the within-item
    variance is the population variance over that item's raters.
    """
    qualifying = [s for s in truth if s.size >= MIN_RATERS]
    if not qualifying:
        raise DomainError(
            f"no item has at least {MIN_RATERS} ratings"
        )
    variances = np.stack([s.vectors.var(axis=0) for s in qualifying])
    return np.sqrt(variances.mean(axis=0))


@dataclass(frozen=True)
class RegressionReport:
    """Per-characteristic regression quality plus the overall Mahalanobis."""

    characteristic_names: tuple[str, ...]
    rmse: tuple[float, ...]
    inter_observer: tuple[float, ...]
    correlation: tuple[float | None, ...]
    entropy: tuple[float, ...]
    mahalanobis_mean: float
    mahalanobis_ridge: float
    items_used: int
    items_skipped: int

    def rows(self):
        for i, name in enumerate(self.characteristic_names):
            yield (name, self.rmse[i], self.inter_observer[i],
                   self.correlation[i], self.entropy[i])

    def to_csv(self) -> str:
        lines = ["characteristic,rmse,inter_observer_rmse,correlation,entropy"]
        for name, rmse, inter, corr, ent in self.rows():
            corr_text = "NA" if corr is None else f"{corr:.6f}"
            lines.append(f"{name},{rmse:.6f},{inter:.6f},{corr_text},{ent:.6f}")
        return "\n".join(lines) + "\n"


def build_regression_report(predicted, truth: list[RatingSet],
                            schema: CharacteristicSchema = DEFAULT_SCHEMA,
                            ridge: float = DEFAULT_RIDGE) -> RegressionReport:
    """Assemble the full per-characteristic evaluation table."""
    rmse = per_param_rmse(predicted, truth)
    corr = per_param_correlation(predicted, truth)
    inter = inter_observer_rmse(truth)
    entropy = [param_entropy(truth, c, schema) for c in range(schema.size)]
    maha, used, skipped = dataset_mahalanobis(predicted, truth, ridge)
    return RegressionReport(
        characteristic_names=schema.names,
        rmse=tuple(float(v) for v in rmse),
        inter_observer=tuple(float(v) for v in inter),
        correlation=tuple(corr),
        entropy=tuple(entropy),
        mahalanobis_mean=maha,
        mahalanobis_ridge=ridge,
        items_used=used,
        items_skipped=skipped,
    )
