"""
Tests for dominance, hypervolume and the Pareto archive.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evocompress.pareto import (
    ParetoArchive,
    _sweep,
    dominates,
    hypervolume,
    hypervolume_contributions,
    hypervolume_mc,
    nondominated_subset,
    reference_point,
    truncate_by_contribution,
    weakly_dominates,
)
from evocompress.rng import make_rng

points_3d = st.lists(st.tuples(*[st.integers(0, 5)] * 3), min_size=1, max_size=25)


def test_dominance_examples():
    """Test dominance on size-only and trade-off pairs."""
    assert dominates((0.9, -10), (0.9, -12))
    assert not dominates((0.9, -10), (0.8, -12)) or not dominates((0.8, -12), (0.9, -10))
    assert not dominates((0.9, -10), (0.8, -8))
    assert not dominates((0.8, -8), (0.9, -10))
    assert not dominates((1, 1), (1, 1))
    assert weakly_dominates((1, 1), (1, 1))


def test_dominance_length_mismatch():
    """Test that vectors of different length cannot be compared."""
    with pytest.raises(ValueError):
        dominates((1, 2), (1, 2, 3))


def test_hypervolume_examples():
    """Test hypervolume of a single point and of two points."""
    assert hypervolume([(1, 1)], (0, 0)) == 1.0
    assert hypervolume([(2, 1), (1, 2)], (0, 0)) == 3.0
    assert hypervolume([], (0, 0)) == 0.0


def test_hypervolume_rejects_points_behind_reference():
    """Test that points not dominating the reference are refused."""
    with pytest.raises(ValueError):
        hypervolume([(1, -1)], (0, 0))


def test_hypervolume_three_dimensional_inclusion_exclusion():
    """Test a 3-D front against inclusion-exclusion."""
    front = [(2, 1, 1), (1, 2, 1), (1, 1, 2)]
    # three boxes of volume 2, pairwise overlaps of 1, triple overlap 1
    assert hypervolume(front, (0, 0, 0)) == pytest.approx(3 * 2 - 3 * 1 + 1)


def test_exact_and_monte_carlo_agree_in_3d():
    """Test the exact 3-D sweep against a Monte-Carlo estimate."""
    r = make_rng(0, "hv3")
    front = [tuple(p) for p in r.random((12, 3)) + 0.1]
    exact = hypervolume(front, (0, 0, 0))
    estimate = hypervolume_mc(front, (0, 0, 0), samples=400_000, seed=1)

    assert estimate == pytest.approx(exact, rel=0.01)


def test_five_objectives_use_monte_carlo():
    """Test that five objectives fall back to sampling within 1%."""
    r = make_rng(1, "hv5")
    front = r.random((6, 5)) + 0.5
    exact = _sweep(front, np.zeros(5))
    estimate = hypervolume([tuple(p) for p in front], (0,) * 5, mc_samples=400_000)

    assert estimate == pytest.approx(exact, rel=0.01)


def test_contributions():
    """Test exclusive contributions of two overlapping boxes."""
    contributions = hypervolume_contributions([(2, 1), (1, 2)], (0, 0))
    assert contributions == pytest.approx([1.0, 1.0])


def test_reference_point():
    """Test componentwise minimum minus eps."""
    assert reference_point([(1, 5), (3, 2)], eps=0.5) == (0.5, 1.5)
    with pytest.raises(ValueError):
        reference_point([])


def test_archive_insert_and_evict():
    """Test acceptance, rejection of dominated candidates and eviction."""
    archive = ParetoArchive()

    assert archive.insert(0, (0.8, -10))
    assert archive.insert(1, (0.9, -12))
    assert not archive.insert(2, (0.7, -11))
    assert not archive.insert(3, (0.8, -10))
    assert archive.insert(4, (0.9, -9))

    assert archive.ids == [4]
    archive.check()


def test_archive_rejects_non_finite():
    """Test that NaN objectives never enter the archive."""
    archive = ParetoArchive()
    assert not archive.insert(0, (float("nan"), 1.0))
    assert len(archive) == 0


def test_archive_dict_round_trip():
    """Test archive serialization."""
    archive = ParetoArchive()
    archive.insert(3, (1.0, -2.0))
    archive.insert(7, (2.0, -3.0))

    again = ParetoArchive.from_dict(archive.to_dict())

    assert again.members == archive.members


def test_truncate_prefers_contribution_then_lower_id():
    """Test truncation by contribution with ties going to the lower id."""
    ids = [5, 2, 9]
    points = [(3, 1), (1, 3), (3, 1)]

    kept = truncate_by_contribution(ids, points, 2, (0, 0))

    assert kept == [2, 5]


@settings(max_examples=60, deadline=None)
@given(a=st.tuples(*[st.integers(0, 3)] * 3), b=st.tuples(*[st.integers(0, 3)] * 3),
       c=st.tuples(*[st.integers(0, 3)] * 3))
def test_dominance_is_strict_partial_order(a, b, c):
    """Test irreflexivity, asymmetry and transitivity of dominance."""
    assert not dominates(a, a)
    assert not (dominates(a, b) and dominates(b, a))
    if dominates(a, b) and dominates(b, c):
        assert dominates(a, c)


@settings(max_examples=60, deadline=None)
@given(points=points_3d)
def test_archive_equals_nondominated_subset(points):
    """Test that sequential insertion keeps exactly the non-dominated points."""
    archive = ParetoArchive()
    for i, p in enumerate(points):
        archive.insert(i, p)

    expected = {tuple(float(v) for v in points[i]) for i in nondominated_subset(points)}

    assert set(archive.points) == expected
    archive.check()


@settings(max_examples=40, deadline=None)
@given(points=points_3d)
def test_hypervolume_never_decreases_on_insert(points):
    """Test that archive hypervolume is monotone under insertion."""
    ref = (-1.0, -1.0, -1.0)
    archive = ParetoArchive()
    previous = 0.0
    for i, p in enumerate(points):
        archive.insert(i, p)
        current = archive.hypervolume(ref)
        assert current >= previous - 1e-9
        previous = current
