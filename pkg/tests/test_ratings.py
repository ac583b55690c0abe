import math

import numpy as np
import numpy.testing as npt
import pytest

from conftest import WIDE_SCHEMA, random_rating_sets
from semble.errors import DomainError, SchemaError
from semble.ratings import (
    DEFAULT_SCHEMA,
    CharacteristicSchema,
    DistanceMatrix,
    MalignancyClass,
    RatingSet,
    RatingVector,
    malignancy_class,
    mean_rating,
    rating_l2,
    set_distance,
    set_distance_matrix,
)

SCHEMA_2D = CharacteristicSchema(("a", "b"), ((0.0, 10.0), (0.0, 10.0)))


def vec2(x, y):
    return RatingVector(np.array([x, y], dtype=float), SCHEMA_2D)


def brute_force_set_distance(a, b):
    """Independent oracle: explicit loops, no shared code with the library."""
    def l2(u, v):
        return math.sqrt(sum((ui - vi) ** 2 for ui, vi in zip(u, v)))

    term_ab = sum(min(l2(u, v) for v in b) for u in a) / len(a)
    term_ba = sum(min(l2(v, u) for u in a) for v in b) / len(b)
    return 0.5 * term_ab + 0.5 * term_ba


class TestSchema:
    def test_default_has_nine_characteristics(self):
        assert DEFAULT_SCHEMA.size == 9
        assert DEFAULT_SCHEMA.names[-1] == "Malignancy"
        assert all(r == (1.0, 6.0) for r in DEFAULT_SCHEMA.ranges)

    def test_rejects_empty_and_inverted_ranges(self):
        with pytest.raises(SchemaError):
            CharacteristicSchema((), ())
        with pytest.raises(SchemaError):
            CharacteristicSchema(("a",), ((5.0, 5.0),))

    def test_vector_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            RatingVector(np.full(9, 7.0))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(SchemaError):
            RatingVector(np.ones(4))


class TestRatingL2:
    def test_identical_vectors(self):
        v = RatingVector(np.ones(9))
        assert rating_l2(v, v) == 0.0

    def test_3_4_5_triangle(self):
        assert rating_l2(vec2(0, 0), vec2(3, 4)) == 5.0

    def test_matches_elementwise_oracle(self, rng):
        for _ in range(50):
            a = rng.uniform(0, 10, size=9)
            b = rng.uniform(0, 10, size=9)
            got = rating_l2(RatingVector(a, WIDE_SCHEMA), RatingVector(b, WIDE_SCHEMA))
            expect = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
            assert abs(got - expect) < 1e-12

    def test_schema_mismatch(self):
        with pytest.raises(SchemaError):
            rating_l2(RatingVector(np.ones(9)), vec2(1, 1))


class TestSetDistance:
    def test_identical_sets_are_zero(self, rng):
        sets = random_rating_sets(rng, 5)
        for s in sets:
            assert set_distance(s, s) == 0.0

    def test_singletons_reduce_to_l2(self):
        a = RatingSet.of([vec2(0, 0)])
        b = RatingSet.of([vec2(3, 4)])
        assert set_distance(a, b) == 5.0

    def test_hand_case(self):
        a = RatingSet(np.array([[1.0, 0.0], [0.0, 1.0]]), None, SCHEMA_2D)
        b = RatingSet(np.array([[0.0, 0.0]]), None, SCHEMA_2D)
        assert set_distance(a, b) == 1.0

    def test_singleton_equals_rating_l2_exactly(self, rng):
        for _ in range(25):
            u = rng.uniform(0, 10, size=9)
            v = rng.uniform(0, 10, size=9)
            sd = set_distance(RatingSet(u[None, :], None, WIDE_SCHEMA),
                              RatingSet(v[None, :], None, WIDE_SCHEMA))
            assert sd == rating_l2(RatingVector(u, WIDE_SCHEMA),
                                   RatingVector(v, WIDE_SCHEMA))

    def test_matches_brute_force_oracle(self, rng):
        for _ in range(200):
            a, b = random_rating_sets(rng, 2)
            got = set_distance(a, b)
            expect = brute_force_set_distance(a.vectors.tolist(), b.vectors.tolist())
            assert abs(got - expect) < 1e-9

    def test_symmetry(self, rng):
        for _ in range(40):
            a, b = random_rating_sets(rng, 2)
            assert set_distance(a, b) == set_distance(b, a)

    def test_duplicating_elements_preserves_distance(self, rng):
        # duplicating every rating doubles each nearest-neighbour term and
        # the averaging count together, so the distance is unchanged
        for _ in range(20):
            a, b = random_rating_sets(rng, 2)
            doubled = RatingSet(np.vstack([a.vectors, a.vectors]), None, a.schema)
            npt.assert_allclose(set_distance(doubled, b), set_distance(a, b),
                                rtol=0, atol=1e-12)

    def test_empty_set_impossible(self):
        with pytest.raises(DomainError):
            RatingSet(np.empty((0, 9)))

    def test_triangle_inequality_not_assumed(self):
        # the mean-of-minima distance is not a metric; this documents a
        # violating instance rather than asserting the inequality
        s = CharacteristicSchema(("x",), ((-100.0, 100.0),))
        a = RatingSet(np.array([[0.0]]), None, s)
        b = RatingSet(np.array([[0.0], [10.0]]), None, s)
        c = RatingSet(np.array([[10.0]]), None, s)
        d_ab = set_distance(a, b)
        d_bc = set_distance(b, c)
        d_ac = set_distance(a, c)
        assert d_ac > d_ab + d_bc


class TestSetDistanceMatrix:
    def test_identical_sets_zero_matrix(self, rng):
        (s,) = random_rating_sets(rng, 1)
        m = set_distance_matrix([s, s, s])
        npt.assert_array_equal(m.entries, np.zeros((3, 3)))

    def test_two_singletons(self):
        a = RatingSet.of([vec2(0, 0)])
        b = RatingSet.of([vec2(3, 4)])
        m = set_distance_matrix([a, b])
        npt.assert_array_equal(m.entries, [[0.0, 5.0], [5.0, 0.0]])

    def test_matches_pairwise_oracle_exactly(self, rng):
        for _ in range(30):
            n = int(rng.integers(2, 11))
            sets = random_rating_sets(rng, n)
            m = set_distance_matrix(sets).entries
            for i in range(n):
                for j in range(n):
                    expect = 0.0 if i == j else set_distance(sets[i], sets[j])
                    assert m[i, j] == expect

    def test_needs_two_sets(self, rng):
        (s,) = random_rating_sets(rng, 1)
        with pytest.raises(DomainError):
            set_distance_matrix([s])

    def test_invariants_hold(self, rng):
        sets = random_rating_sets(rng, 8)
        m = set_distance_matrix(sets)
        npt.assert_array_equal(m.entries, m.entries.T)
        assert np.all(np.diagonal(m.entries) == 0.0)
        assert np.all(m.entries >= 0.0)


class TestMeanRating:
    def test_singleton(self):
        v = RatingVector(np.array([3.0, 1.0, 3.0, 3.0, 4.0, 3.0, 1.0, 5.0, 1.0]))
        s = RatingSet.of([v])
        npt.assert_array_equal(mean_rating(s).values, v.values)

    def test_midpoint(self):
        s = RatingSet(np.stack([np.full(9, 1.0), np.full(9, 5.0)]))
        npt.assert_array_equal(mean_rating(s).values, np.full(9, 3.0))

    def test_weights_ignored(self):
        s = RatingSet(np.stack([np.full(9, 1.0), np.full(9, 5.0)]),
                      np.array([10.0, 1.0]))
        npt.assert_array_equal(mean_rating(s).values, np.full(9, 3.0))

    def test_rounded_mean_matches_display_vector(self):
        # two integer raters whose rounded mean is the displayed summary
        votes = np.array([
            [2.0, 1.0, 3.0, 3.0, 4.0, 3.0, 1.0, 5.0, 1.0],
            [4.0, 1.0, 3.0, 3.0, 4.0, 3.0, 1.0, 5.0, 1.0],
        ])
        mean = mean_rating(RatingSet(votes)).values
        npt.assert_array_equal(np.rint(mean),
                               [3.0, 1.0, 3.0, 3.0, 4.0, 3.0, 1.0, 5.0, 1.0])


class TestMalignancyClass:
    @pytest.mark.parametrize("score,expected", [
        (1.5, MalignancyClass.BENIGN),
        (2.5, MalignancyClass.BENIGN),
        (3.0, MalignancyClass.UNKNOWN),
        (3.5, MalignancyClass.MALIGNANT),
        (4.5, MalignancyClass.MALIGNANT),
    ])
    def test_thresholds(self, score, expected):
        assert malignancy_class(score) is expected

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            malignancy_class(0.5)
        with pytest.raises(DomainError):
            malignancy_class(6.5)


class TestDistanceMatrixType:
    def test_rejects_asymmetric(self):
        with pytest.raises(DomainError):
            DistanceMatrix(np.array([[0.0, 1.0], [2.0, 0.0]]))

    def test_rejects_nonzero_diagonal(self):
        with pytest.raises(DomainError):
            DistanceMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_negative(self):
        with pytest.raises(DomainError):
            DistanceMatrix(np.array([[0.0, -1.0], [-1.0, 0.0]]))
