import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabdet.geometry import (
    bev_corners, clip_convex, normalize_yaw, polygon_area, rotated_bev_iou, segment_box_entry,
)


def mc_iou(a, b, n, rng):
    """Monte Carlo IoU: sample the joint bounding square, test membership in each box."""
    def inside(box, pts):
        cx, cy, l, w, yaw = box
        c, s = math.cos(yaw), math.sin(yaw)
        dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)

    ra = 0.5 * math.hypot(a[2], a[3])
    rb = 0.5 * math.hypot(b[2], b[3])
    lo = np.minimum([a[0] - ra, a[1] - ra], [b[0] - rb, b[1] - rb])
    hi = np.maximum([a[0] + ra, a[1] + ra], [b[0] + rb, b[1] + rb])
    pts = lo + rng.random((n, 2)) * (hi - lo)
    ia, ib = inside(a, pts), inside(b, pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def test_identical_boxes():
    box = (1.0, -2.0, 4.5, 1.9, 0.7)
    assert rotated_bev_iou(box, box) == pytest.approx(1.0, abs=1e-12)


def test_disjoint_boxes():
    assert rotated_bev_iou((0, 0, 2, 2, 0), (10, 0, 2, 2, 0.3)) == 0.0


def test_offset_squares_one_third():
    assert rotated_bev_iou((0, 0, 2, 2, 0), (1, 0, 2, 2, 0)) == pytest.approx(1 / 3, abs=1e-12)
    rng = np.random.default_rng(0)
    assert abs(mc_iou((0, 0, 2, 2, 0), (1, 0, 2, 2, 0), 200_000, rng) - 1 / 3) < 0.005


def test_rotated_square_in_square():
    # a 45-degree square of side 1 inside a 2x2 square: IoU = 1 / 4
    assert rotated_bev_iou((0, 0, 2, 2, 0), (0, 0, 1, 1, math.pi / 4)) == pytest.approx(0.25, abs=1e-12)


def test_cross_shaped_overlap():
    # two 4x1 bars crossing at right angles share a 1x1 square
    assert rotated_bev_iou((0, 0, 4, 1, 0), (0, 0, 4, 1, math.pi / 2)) == pytest.approx(1 / 7, abs=1e-12)


def test_degenerate_rejected():
    with pytest.raises(ValueError):
        rotated_bev_iou((0, 0, 0, 1, 0), (0, 0, 1, 1, 0))


def test_matches_monte_carlo_on_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(5):
        a = (0.0, 0.0, *rng.uniform(0.5, 5, 2), rng.uniform(-math.pi, math.pi))
        b = (*rng.uniform(-1.5, 1.5, 2), *rng.uniform(0.5, 5, 2), rng.uniform(-math.pi, math.pi))
        assert abs(rotated_bev_iou(a, b) - mc_iou(a, b, 200_000, rng)) < 0.006


box_st = st.tuples(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 6), st.floats(0.2, 6), st.floats(-math.pi, math.pi)
)


@settings(max_examples=150, deadline=None)
@given(box_st, box_st, st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi, math.pi))
def test_symmetry_range_and_rigid_invariance(a, b, tx, ty, rot):
    iou = rotated_bev_iou(a, b)
    assert 0.0 <= iou <= 1.0
    assert abs(iou - rotated_bev_iou(b, a)) <= 1e-9

    def move(box):
        c, s = math.cos(rot), math.sin(rot)
        return (c * box[0] - s * box[1] + tx, s * box[0] + c * box[1] + ty, box[2], box[3], box[4] + rot)

    assert abs(iou - rotated_bev_iou(move(a), move(b))) <= 1e-9


def test_corners_are_counter_clockwise_with_correct_area():
    poly = bev_corners(3, 4, 4.0, 2.0, 1.1)
    x, y = poly[:, 0], poly[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert signed == pytest.approx(8.0)
    assert polygon_area(poly) == pytest.approx(8.0)


def test_clip_of_disjoint_polygons_is_empty():
    assert len(clip_convex(bev_corners(0, 0, 1, 1, 0), bev_corners(5, 5, 1, 1, 0))) == 0


@pytest.mark.parametrize("yaw, expected", [
    (0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi), (2 * math.pi + 0.5, 0.5),
])
def test_normalize_yaw_half_open_interval(yaw, expected):
    assert normalize_yaw(yaw) == pytest.approx(expected, abs=1e-12)


def test_segment_box_entry():
    origin = np.array([0.0, 0.0, 1.0])
    targets = np.array([[10.0, 0.0, 1.0], [10.0, 5.0, 1.0], [3.0, 0.0, 1.0]])
    t = segment_box_entry(origin, targets, (5.0, 0.0, 1.0), (2.0, 2.0, 2.0), 0.0)
    assert t[0] == pytest.approx(0.4)
    assert np.isinf(t[1]) and np.isinf(t[2])
