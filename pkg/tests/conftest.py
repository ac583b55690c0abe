"""Shared test helpers: finite differences and random fixtures."""

import numpy as np
import pytest

from semble.ratings import CharacteristicSchema, RatingSet


WIDE_SCHEMA = CharacteristicSchema(
    tuple(f"c{i}" for i in range(9)), ((0.0, 10.0),) * 9
)


def finite_difference(func, x, step=1e-5):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = x.copy()
        plus[idx] += step
        minus = x.copy()
        minus[idx] -= step
        grad[idx] = (func(plus) - func(minus)) / (2.0 * step)
        it.iternext()
    return grad


def max_relative_error(analytic, numeric):
    """Max absolute deviation normalized by the numeric gradient scale."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_distance_matrix(rng, size, scale=1.0, dim=3):
    """Valid random distance matrix built from random points."""
    points = rng.normal(size=(size, dim)) * scale
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def random_rating_sets(rng, count, max_raters=4, schema=WIDE_SCHEMA):
    sets = []
    lows = np.array([r[0] for r in schema.ranges])
    highs = np.array([r[1] for r in schema.ranges])
    for _ in range(count):
        k = int(rng.integers(1, max_raters + 1))
        sets.append(RatingSet(rng.uniform(lows, highs, size=(k, schema.size)),
                              None, schema))
    return sets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
