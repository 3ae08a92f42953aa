"""Cone feasibility, projection, and support-enumeration behavior."""

import numpy as np
import pytest

from mmv import cones
from mmv.cones import (
    ConeConstraint,
    EnumerationCapError,
    UnsupportedConeError,
    random_feasible_points,
)


class TestFeasibility:
    def test_origin_is_in_every_cone(self):
        for cone in (
            cones.unconstrained(3),
            cones.nonnegative(3),
            cones.linear_cone(np.ones((1, 3))),
            cones.cardinality(2, 3),
        ):
            assert cone.is_feasible(np.zeros(3))

    def test_table_one_allocation_is_feasible(self):
        # Two nonzero long positions under no-shorting plus sparsity two.
        cone = cones.intersect(cones.nonnegative(4), cones.cardinality(2, 4))
        assert cone.is_feasible(np.array([0.0, 1.33, 0.0, 0.55]))

    def test_three_nonzeros_exceed_cardinality_two(self):
        cone = cones.cardinality(2, 4)
        assert not cone.is_feasible(np.array([0.1, 0.1, 0.1, 0.0]))

    def test_negative_coordinate_fails_no_shorting(self):
        assert not cones.nonnegative(2).is_feasible(np.array([-0.01, 1.0]))

    def test_tolerance_is_honored(self):
        cone = cones.nonnegative(2)
        assert cone.is_feasible(np.array([-1e-10, 1.0]), tol=1e-9)
        assert not cone.is_feasible(np.array([-1e-6, 1.0]), tol=1e-9)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            cones.nonnegative(3).is_feasible(np.zeros(2))

    def test_cone_scaling_property(self):
        # pi feasible implies alpha * pi feasible for alpha > 0.
        rng = np.random.default_rng(123)
        cone = cones.intersect(
            cones.nonnegative(5),
            cones.linear_cone(np.array([[1.0, 1.0, 1.0, -1.0, 0.0]])),
            cones.cardinality(3, 5),
        )
        for pi in random_feasible_points(cone, 1000, rng):
            alpha = rng.uniform(1e-6, 10.0)
            assert cone.is_feasible(alpha * pi, tol=1e-7), (alpha, pi)


class TestProjection:
    def test_unconstrained_is_identity(self):
        v = np.array([1.5, -2.0, 0.2])
        assert np.array_equal(cones.unconstrained(3).project(v), v)

    def test_nonnegative_is_coordinatewise_clamp(self):
        out = cones.nonnegative(2).project(np.array([-1.0, 2.0]))
        assert np.allclose(out, [0.0, 2.0])

    def test_halfspace_projection_matches_hand_kkt(self):
        # e'pi >= 0 violated by (-2, 1): the optimality system moves the
        # point along e by (e'v)/||e||^2, landing at (-1.5, 1.5).
        cone = cones.linear_cone(np.ones((1, 2)))
        out = cone.project(np.array([-2.0, 1.0]))
        assert np.allclose(out, [-1.5, 1.5], atol=1e-12)

    def test_projection_is_idempotent(self):
        rng = np.random.default_rng(7)
        cone = cones.intersect(cones.nonnegative(4), cones.linear_cone(np.array([[1.0, -1.0, 0.5, 0.0]])))
        for _ in range(50):
            p = cone.project(rng.standard_normal(4))
            assert np.linalg.norm(cone.project(p) - p) <= 1e-12

    def test_projection_optimality_against_random_feasible_points(self):
        rng = np.random.default_rng(11)
        cone = cones.intersect(cones.nonnegative(3), cones.linear_cone(np.array([[1.0, 1.0, -2.0]])))
        v = rng.standard_normal(3) * 2
        proj = cone.project(v)
        best = np.linalg.norm(proj - v)
        for pi in random_feasible_points(cone, 1000, rng, scale=2.0):
            assert best <= np.linalg.norm(pi - v) + 1e-10

    def test_projection_of_sparse_cone_is_unsupported(self):
        with pytest.raises(UnsupportedConeError):
            cones.cardinality(1, 3).project(np.zeros(3))

    def test_nonneg_polar_cone_characterization(self):
        # y is in the polar cone of the orthant iff every coordinate <= 0.
        rng = np.random.default_rng(19)
        cone = cones.nonnegative(4)
        feasible = [p for p in random_feasible_points(cone, 200, rng)]
        for _ in range(200):
            y = rng.standard_normal(4)
            in_polar = all(float(y @ p) <= 1e-9 for p in feasible)
            assert in_polar == bool(np.all(y <= 1e-9))


class TestSupportEnumeration:
    def test_counts_four_choose_up_to_two(self):
        patterns = cones.cardinality(2, 4).enumerate_supports()
        assert len(patterns) == 10
        sizes = sorted(len(p) for p in patterns)
        assert sizes == [1, 1, 1, 1, 2, 2, 2, 2, 2, 2]

    def test_counts_ten_choose_up_to_two(self):
        assert len(cones.cardinality(2, 10).enumerate_supports()) == 55

    def test_counts_all_nonempty_subsets(self):
        assert len(cones.cardinality(4, 4).enumerate_supports()) == 15

    def test_cap_exceeded_mentions_greedy(self):
        cone = cones.cardinality(2, 4)
        with pytest.raises(EnumerationCapError, match="greedy"):
            cone.enumerate_supports(cap=5)

    def test_restrict_keeps_convex_members(self):
        cone = cones.intersect(
            cones.nonnegative(4),
            cones.linear_cone(np.array([[1.0, 0.0, -1.0, 0.0]])),
            cones.cardinality(2, 4),
        )
        sub = cone.restrict([0, 2])
        assert sub.require_nonnegative
        assert sub.linear.shape == (1, 2)
        assert sub.max_active is None
        # Restricting to coordinates absent from the linear row drops it.
        sub2 = cone.restrict([1, 3])
        assert sub2.linear is None


class TestConstruction:
    def test_intersection_rejects_two_cardinality_members(self):
        with pytest.raises(ValueError):
            cones.intersect(cones.cardinality(1, 3), cones.cardinality(2, 3))

    def test_cardinality_bounds_validated(self):
        with pytest.raises(ValueError):
            cones.cardinality(0, 3)
        with pytest.raises(ValueError):
            cones.cardinality(4, 3)

    def test_json_round_trip(self):
        cone = cones.intersect(
            cones.nonnegative(4),
            cones.cardinality(2, 4),
            cones.linear_cone(np.array([[1.0, 1.0, 1.0, 1.0]])),
        )
        clone = ConeConstraint.from_json_dict(cone.to_json_dict())
        assert clone.dimension == 4
        assert clone.require_nonnegative
        assert clone.max_active == 2
        assert np.allclose(clone.linear, cone.linear)
