import math

import numpy as np
import pytest
from hypothesis import given, settings

from boxkit.geometry import (Box, area, aspect_term, distance_term, enclosing_box, iou,
                             pairwise_diou, pairwise_distance_term, pairwise_iou)

from conftest import box_strategy, corners_box


def raster_iou(a: Box, b: Box, step: float = 0.01) -> float:
    """Count grid-cell centers inside each box."""
    x1 = min(a.corners[0], b.corners[0])
    y1 = min(a.corners[1], b.corners[1])
    x2 = max(a.corners[2], b.corners[2])
    y2 = max(a.corners[3], b.corners[3])
    xs = np.arange(x1 + step / 2, x2, step)
    ys = np.arange(y1 + step / 2, y2, step)
    gx, gy = np.meshgrid(xs, ys)

    def inside(b):
        bx1, by1, bx2, by2 = b.corners
        return (gx > bx1) & (gx < bx2) & (gy > by1) & (gy < by2)

    ia, ib = inside(a), inside(b)
    return (ia & ib).sum() / (ia | ib).sum()


class TestBox:
    def test_corner_round_trip(self):
        b = corners_box(1.0, 2.0, 4.0, 8.0)
        assert (b.x, b.y, b.w, b.h) == (2.5, 5.0, 3.0, 6.0)
        assert b.corners == (1.0, 2.0, 4.0, 8.0)

    def test_degenerate_sides_are_clamped(self):
        b = Box(0.0, 0.0, 0.0, -3.0)
        assert b.w == b.floor and b.h == b.floor

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Box(float("nan"), 0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            Box(0.0, 0.0, float("inf"), 1.0)

    def test_scaled_and_shifted(self):
        b = Box(1.0, 2.0, 3.0, 4.0)
        assert b.scaled(2.0) == Box(2.0, 4.0, 6.0, 8.0)
        assert b.shifted(1.0, -1.0) == Box(2.0, 1.0, 3.0, 4.0)


class TestArea:
    @pytest.mark.parametrize("w,h,expected", [(1, 1, 1), (3, 2, 6), (0.5, 0.5, 0.25)])
    def test_examples(self, w, h, expected):
        assert area(Box(0, 0, w, h)) == pytest.approx(expected)


class TestIoU:
    def test_identity(self):
        b = Box(3, 4, 2, 5)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(corners_box(0, 0, 1, 1), corners_box(2, 2, 3, 3)) == 0.0

    def test_touching_edges_is_zero(self):
        assert iou(corners_box(0, 0, 1, 1), corners_box(1, 0, 2, 1)) == 0.0

    def test_against_rasterization(self):
        a, b = corners_box(0, 0, 2, 2), corners_box(1, 1, 3, 3)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert raster_iou(a, b) == pytest.approx(iou(a, b), abs=1e-3)

    def test_random_pairs_against_rasterization(self, rng):
        for _ in range(10):
            a = Box(*rng.uniform(0, 3, 2), *rng.uniform(0.5, 3, 2))
            b = Box(*rng.uniform(0, 3, 2), *rng.uniform(0.5, 3, 2))
            assert raster_iou(a, b, step=0.005) == pytest.approx(iou(a, b), abs=5e-3)

    @given(box_strategy(), box_strategy())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)

    @given(box_strategy(), box_strategy())
    @settings(max_examples=50)
    def test_pairwise_matches_scalar(self, a, b):
        m = pairwise_iou([a.corners], [b.corners])
        assert m.shape == (1, 1)
        assert m[0, 0] == pytest.approx(iou(a, b), abs=1e-12)


class TestEnclosingBox:
    def test_identity(self):
        b = corners_box(0, 0, 1, 1)
        assert enclosing_box(b, b) == b

    def test_hull(self):
        assert enclosing_box(corners_box(0, 0, 1, 1), corners_box(2, 2, 3, 3)).corners == (0, 0, 3, 3)

    def test_nested(self):
        assert enclosing_box(corners_box(0, 0, 4, 4), corners_box(1, 1, 2, 2)).corners == (0, 0, 4, 4)

    @given(box_strategy(), box_strategy())
    def test_contains_both(self, a, b):
        c = enclosing_box(a, b).corners
        tol = 1e-12 * (1 + max(map(abs, c)))
        for box in (a, b):
            x1, y1, x2, y2 = box.corners
            assert c[0] <= x1 + tol and c[1] <= y1 + tol and c[2] >= x2 - tol and c[3] >= y2 - tol


class TestDistanceTerm:
    def test_concentric(self):
        assert distance_term(Box(1, 1, 2, 2), Box(1, 1, 5, 0.5)) == 0.0

    def test_hand_example(self):
        assert distance_term(corners_box(0, 0, 2, 2), corners_box(2, 0, 4, 2)) == pytest.approx(0.2)

    @given(box_strategy(), box_strategy())
    def test_range_and_symmetry(self, a, b):
        d = distance_term(a, b)
        assert 0.0 <= d < 1.0
        assert d == pytest.approx(distance_term(b, a), abs=1e-15)

    def test_pairwise_matches_scalar(self, rng):
        boxes = [Box(*rng.uniform(-5, 5, 2), *rng.uniform(0.5, 4, 2)) for _ in range(6)]
        corners = np.array([b.corners for b in boxes])
        m = pairwise_distance_term(corners, corners)
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                assert m[i, j] == pytest.approx(distance_term(a, b), abs=1e-12)
        assert np.allclose(pairwise_diou(corners, corners), pairwise_iou(corners, corners) - m)


class TestAspectTerm:
    def test_equal_ratios(self):
        assert aspect_term(Box(0, 0, 1, 2), Box(5, 5, 3, 6)) == pytest.approx(0.0, abs=1e-15)

    def test_one_to_one_vs_four_to_one(self):
        expected = 4 / math.pi**2 * (math.atan(4) - math.atan(1)) ** 2
        assert aspect_term(Box(0, 0, 4, 1), Box(0, 0, 1, 1)) == pytest.approx(expected)
        assert expected == pytest.approx(0.11836, abs=1e-5)

    @given(box_strategy(min_side=1e-3, max_side=1e3), box_strategy(min_side=1e-3, max_side=1e3))
    def test_below_one(self, a, b):
        assert 0.0 <= aspect_term(a, b) < 1.0


class TestInvariance:
    def test_integer_boxes_against_rasterization(self, rng):
        pitch = 0.05
        for _ in range(15):
            x1, x2 = sorted(rng.choice(7, 2, replace=False))
            y1, y2 = sorted(rng.choice(7, 2, replace=False))
            u1, u2 = sorted(rng.choice(7, 2, replace=False))
            v1, v2 = sorted(rng.choice(7, 2, replace=False))
            a, b = corners_box(x1, y1, x2, y2), corners_box(u1, v1, u2, v2)
            assert abs(raster_iou(a, b, pitch) - iou(a, b)) <= 2 * pitch

    @given(box_strategy(), box_strategy())
    def test_symmetry(self, a, b):
        assert aspect_term(a, b) == aspect_term(b, a)
        assert iou(a, b) == iou(b, a)

    @given(box_strategy(), box_strategy())
    @settings(max_examples=60)
    def test_scale_and_translation(self, a, b):
        for fn in (iou, distance_term, aspect_term):
            base = fn(a, b)
            for k in (0.01, 3.0, 100.0):
                assert fn(a.scaled(k), b.scaled(k)) == pytest.approx(base, rel=1e-9, abs=1e-12)
            assert fn(a.shifted(-4.0, 9.5), b.shifted(-4.0, 9.5)) == pytest.approx(base, rel=1e-9, abs=1e-12)

    def test_clamped_boxes(self):
        a, b = Box(0, 0, 0, 0), Box(5, 5, 0, 0)
        assert iou(a, b) == 0.0
        assert iou(a, Box(0, 0, 0, 0)) == 1.0
        assert distance_term(a, a) == 0.0
