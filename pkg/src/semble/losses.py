"""Training objectives with analytic gradients.

Three kinds of objective are provided: per-item score regression,
paired embedding-distance regression, and batch losses that compare a
predicted pairwise distance matrix against the true rating-space
distance matrix. Every function returns a :class:`LossResult` holding
the scalar value and the gradient with respect to the predicted
quantity, so the training loop never needs autodiff.

Distance-matrix arguments accept either a validated
:class:`~semble.ratings.DistanceMatrix` or a raw square array; unit
tests use raw arrays to probe configurations a valid distance matrix
cannot reach.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, DomainError, NormalizationError, SchemaError
from .ratings import DistanceMatrix

_LN2 = float(np.log(2.0))
_VAR_EPS = 1e-30


@dataclass(frozen=True, eq=False)
class LossResult:
    """Scalar loss value plus gradient w.r.t. the predicted input."""

    value: float
    gradient: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise DomainError(f"loss value is not finite: {self.value}")


@dataclass(frozen=True, eq=False)
class BatchTargets:
    """Per-batch training targets: true distances plus mean-score rows."""

    true_distances: DistanceMatrix
    target_ratings: np.ndarray

    def __post_init__(self):
        targets = np.asarray(self.target_ratings, dtype=float)
        if targets.ndim != 2 or targets.shape[0] != self.true_distances.size:
            raise SchemaError(
                f"target ratings {targets.shape} do not match "
                f"batch size {self.true_distances.size}"
            )
        object.__setattr__(self, "target_ratings", targets)

    @property
    def batch_size(self) -> int:
        return self.true_distances.size


def _logcosh(x: np.ndarray) -> np.ndarray:
    # log(cosh(x)) = |x| + log1p(exp(-2|x|)) - log 2, stable for large |x|
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - _LN2


def _as_square(m, name: str) -> np.ndarray:
    a = m.entries if isinstance(m, DistanceMatrix) else np.asarray(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise SchemaError(f"{name} must be a square matrix, got shape {a.shape}")
    return a


def _check_same_size(p: np.ndarray, t: np.ndarray) -> int:
    if p.shape != t.shape:
        raise SchemaError(f"size mismatch: predicted {p.shape} vs target {t.shape}")
    return p.shape[0]


def logcosh_regression(predicted, target) -> LossResult:
    """Mean log-cosh over all entries of a batch of predicted score rows."""
    pred = np.asarray(predicted, dtype=float)
    targ = np.asarray(target, dtype=float)
    if pred.shape != targ.shape:
        raise SchemaError(f"shape mismatch: {pred.shape} vs {targ.shape}")
    diff = pred - targ
    value = float(np.mean(_logcosh(diff)))
    grad = np.tanh(diff) / diff.size
    return LossResult(value, grad)


def dm_logcosh(predicted, target) -> LossResult:
    """Log-cosh of distance residuals, averaged over off-diagonal entries.

    For symmetric inputs this equals the mean over the strict upper
    triangle; defining it over both triangles makes the gradient matrix
    symmetric.
    """
    p = _as_square(predicted, "predicted")
    t = _as_square(target, "target")
    b = _check_same_size(p, t)
    if b < 2:
        raise DomainError("need at least a 2x2 distance matrix")
    off = ~np.eye(b, dtype=bool)
    diff = p - t
    count = b * (b - 1)
    value = float(np.sum(_logcosh(diff)[off]) / count)
    grad = np.where(off, np.tanh(diff) / count, 0.0)
    return LossResult(value, grad)


def _row_pearson(x_rows: np.ndarray, y_rows: np.ndarray, side_names=("target", "predicted")):
    """Row-wise Pearson of paired rows; returns r plus centered terms."""
    xc = x_rows - x_rows.mean(axis=1, keepdims=True)
    yc = y_rows - y_rows.mean(axis=1, keepdims=True)
    sxx = np.sum(xc * xc, axis=1)
    syy = np.sum(yc * yc, axis=1)
    for name, s in zip(side_names, (sxx, syy)):
        if np.any(s <= _VAR_EPS):
            row = int(np.argmax(s <= _VAR_EPS))
            raise DegenerateInputError(
                f"constant {name} row {row}: zero variance under correlation loss"
            )
    sxy = np.sum(xc * yc, axis=1)
    denom = np.sqrt(sxx * syy)
    r = sxy / denom
    return r, xc, yc, syy, denom


def _offdiag_rows(m: np.ndarray) -> np.ndarray:
    b = m.shape[0]
    return m[~np.eye(b, dtype=bool)].reshape(b, b - 1)


def _scatter_offdiag(rows: np.ndarray) -> np.ndarray:
    b = rows.shape[0]
    out = np.zeros((b, b))
    out[~np.eye(b, dtype=bool)] = rows.ravel()
    return out


def dm_pearson(predicted, target) -> LossResult:
    """Negated mean row-wise Pearson correlation of two distance matrices.

    Each row's correlation is taken over its off-diagonal entries (the
    structural zero on the diagonal carries no information and would
    break the positive-affine invariance of the correlation). The value
    is ``-mean_b r(target_b, predicted_b)``, so minimising drives every
    row correlation toward +1.
    """
    p = _as_square(predicted, "predicted")
    t = _as_square(target, "target")
    b = _check_same_size(p, t)
    if b < 3:
        raise DomainError("row-wise correlation needs at least a 3x3 matrix")
    x = _offdiag_rows(t)
    y = _offdiag_rows(p)
    r, xc, yc, syy, denom = _row_pearson(x, y)
    value = float(-np.mean(r))
    grad_rows = -(xc / denom[:, None] - (r / syy)[:, None] * yc) / b
    return LossResult(value, _scatter_offdiag(grad_rows))


def row_softmax(matrix) -> np.ndarray:
    """Row-stochastic normalization with the diagonal included.

    Accepts a single row or a full matrix and returns the same shape.
    """
    m = np.asarray(matrix, dtype=float) if not isinstance(matrix, DistanceMatrix) else matrix.entries
    single = m.ndim == 1
    rows = np.atleast_2d(m)
    if not np.all(np.isfinite(rows)):
        raise DomainError("softmax input must be finite")
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if single else out


def _softmax_backward(softmaxed: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    inner = np.sum(grad_out * softmaxed, axis=1, keepdims=True)
    return softmaxed * (grad_out - inner)


def dm_ranked_pearson(predicted, target) -> LossResult:
    """Pearson distance-matrix loss on row-softmax-normalized distances.

    The softmax normalization (diagonal included) makes the loss depend
    only on relative distances within a row: adding a constant to a row
    leaves the value unchanged.
    """
    p = _as_square(predicted, "predicted")
    t = _as_square(target, "target")
    b = _check_same_size(p, t)
    if b < 3:
        raise DomainError("row-wise correlation needs at least a 3x3 matrix")
    sp = row_softmax(p)
    st = row_softmax(t)
    x = _offdiag_rows(st)
    y = _offdiag_rows(sp)
    r, xc, yc, syy, denom = _row_pearson(x, y)
    value = float(-np.mean(r))
    grad_rows = -(xc / denom[:, None] - (r / syy)[:, None] * yc) / b
    grad_soft = _scatter_offdiag(grad_rows)
    return LossResult(value, _softmax_backward(sp, grad_soft))


def dm_kl(predicted, target, negate_exponent: bool = False) -> LossResult:
    """Row-wise KL divergence between softmax-normalized distance rows.

    Each row is read as a discrete similarity distribution obtained by
    exponentiating the distances and normalizing (diagonal included).
    By default larger distances receive more mass, matching the written
    form of the objective; ``negate_exponent`` flips the sign so nearer
    items dominate instead.
    """
    p = _as_square(predicted, "predicted")
    t = _as_square(target, "target")
    b = _check_same_size(p, t)
    if b < 2:
        raise DomainError("need at least a 2x2 distance matrix")
    sign = -1.0 if negate_exponent else 1.0
    sp = sign * p
    st = sign * t
    # log-softmax computed directly for stability
    sp_shift = sp - sp.max(axis=1, keepdims=True)
    st_shift = st - st.max(axis=1, keepdims=True)
    log_pt = sp_shift - np.log(np.sum(np.exp(sp_shift), axis=1, keepdims=True))
    log_tt = st_shift - np.log(np.sum(np.exp(st_shift), axis=1, keepdims=True))
    t_tilde = np.exp(log_tt)
    p_tilde = np.exp(log_pt)
    value = float(np.sum(t_tilde * (log_tt - log_pt)))
    grad = sign * (p_tilde - t_tilde)
    return LossResult(max(value, 0.0), grad)


def siamese_distance_loss(emb_a, emb_b, true_distance) -> LossResult:
    """Log-cosh regression of embedding-pair distances onto true distances.

    ``gradient`` is stacked: ``gradient[0]`` w.r.t. the first member of
    each pair, ``gradient[1]`` w.r.t. the second. At coincident pairs
    the distance gradient is defined as zero.
    """
    a = np.asarray(emb_a, dtype=float)
    b = np.asarray(emb_b, dtype=float)
    d_true = np.asarray(true_distance, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or d_true.shape != (a.shape[0],):
        raise SchemaError(
            f"expected paired (n, d) embeddings with n true distances, "
            f"got {a.shape}, {b.shape}, {d_true.shape}"
        )
    if np.any(d_true < 0):
        raise DomainError("true pair distances must be nonnegative")
    for name, e in (("first", a), ("second", b)):
        norms = np.sqrt(np.sum(e * e, axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-3):
            bad = int(np.argmax(np.abs(norms - 1.0) > 1e-3))
            raise NormalizationError(
                f"{name} embedding {bad} has norm {norms[bad]:.6f}, expected 1"
            )
    diff = a - b
    dist = np.sqrt(np.sum(diff * diff, axis=1))
    resid = dist - d_true
    n = a.shape[0]
    value = float(np.mean(_logcosh(resid)))
    d_dist = np.tanh(resid) / n
    safe = dist > 1e-12
    unit = np.zeros_like(diff)
    unit[safe] = diff[safe] / dist[safe, None]
    grad_a = d_dist[:, None] * unit
    return LossResult(value, np.stack([grad_a, -grad_a]))


def multi_task_combine(reg: LossResult, sim: LossResult, w_reg: float, w_sim: float) -> LossResult:
    """Weighted blend of a regression and a similarity loss.

    Gradients are combined only when both live on the same input (equal
    shapes) or when one weight is zero; otherwise the blend must happen
    at the shared-parameter level inside the trainer.
    """
    if w_reg < 0 or w_sim < 0:
        raise ConfigError(f"loss weights must be nonnegative, got ({w_reg}, {w_sim})")
    value = w_reg * reg.value + w_sim * sim.value
    if w_sim == 0:
        grad = w_reg * reg.gradient
    elif w_reg == 0:
        grad = w_sim * sim.gradient
    elif reg.gradient.shape == sim.gradient.shape:
        grad = w_reg * reg.gradient + w_sim * sim.gradient
    else:
        raise SchemaError(
            "gradients live on different inputs; combine them on the shared "
            "parameters instead"
        )
    return LossResult(value, grad)
