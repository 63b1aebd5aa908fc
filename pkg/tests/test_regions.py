import numpy as np
import pytest

from app.regions import Annulus, Box, Neighborhood, PointSet


def test_box_membership_and_distance():
    box = Box.square(1.0)
    assert box.contains(np.array([0.5, -0.5]))
    assert not box.contains(np.array([1.5, 0.0]))
    assert box.distance(np.array([2.0, 0.0])) == pytest.approx(1.0)
    assert box.distance(np.array([0.0, 0.0])) == 0.0
    assert box.margin(np.array([0.75, 0.0])) == pytest.approx(0.25)


def test_box_rejects_degenerate_corners():
    with pytest.raises(ValueError):
        Box((0.0, 0.0), (1.0, 0.0))


def test_box_samples_are_reproducible_and_inside():
    box = Box((0.0, -1.0), (2.0, 1.0))
    a = box.sample(64, seed=3)
    b = box.sample(64, seed=3)
    np.testing.assert_array_equal(a, b)
    assert np.all(box.contains(a))


def test_annulus_samples_lie_between_the_radii():
    ring = Annulus((0.0, 0.0), 1.0, 1.5)
    pts = ring.sample(200, seed=0)
    r = np.linalg.norm(pts, axis=1)
    assert np.all((r >= 1.0 - 1e-12) & (r <= 1.5 + 1e-12))
    assert ring.distance(np.array([3.0, 0.0])) == pytest.approx(1.5)
    assert ring.distance(np.array([0.5, 0.0])) == pytest.approx(0.5)
    assert ring.distance(np.array([0.0, 1.2])) == 0.0


def test_annulus_radii_are_validated():
    with pytest.raises(ValueError):
        Annulus((0.0, 0.0), 2.0, 1.0)


def test_empty_point_set_is_infinitely_far():
    empty = PointSet.empty(2)
    assert empty.is_empty
    assert np.isinf(empty.distance(np.array([0.0, 0.0])))
    assert empty.as_array().shape == (0, 2)


def test_point_set_distance():
    pts = PointSet(((0.0, 0.0), (3.0, 4.0)), 2)
    assert pts.distance(np.array([3.0, 0.0])) == pytest.approx(3.0)
    assert pts.contains(np.array([3.0, 4.0]))


def test_neighborhood_samples_stay_within_radius():
    ring = Annulus((0.0, 0.0), 1.0, 1.5)
    U = Neighborhood(ring, 0.25)
    pts = U.sample(100, seed=1)
    assert len(pts) == 100
    assert np.all(ring.distance(pts) <= 0.25 + 1e-12)
    assert U.contains(np.array([1.6, 0.0]))
    assert not U.contains(np.array([1.8, 0.0]))


def test_neighborhood_radius_must_be_positive():
    with pytest.raises(ValueError):
        Neighborhood(Box.square(1.0), 0.0)
