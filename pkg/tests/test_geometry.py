import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confgrasp.geometry import (
    GeometryError,
    GraspRect,
    Heatmap,
    angle_diff,
    format_rect_lines,
    heatmap_target,
    is_success,
    nms_peaks,
    normalize_angle,
    parse_rect_lines,
    rect_from_vertices,
    rect_normalize,
    rotated_iou,
    vertices_from_rect,
)
from oracles import heatmap_scan, monte_carlo_iou

angles = st.floats(-20.0, 20.0, allow_nan=False)
coords = st.floats(-50.0, 50.0, allow_nan=False)
extents = st.floats(0.5, 30.0, allow_nan=False)
rects = st.builds(GraspRect, coords, coords, angles, extents, extents)


def random_rect(rng, span=20.0):
    return GraspRect(*rng.uniform(-span / 4, span / 4, 2), rng.uniform(-4, 4), *rng.uniform(1, span / 2, 2))


# ---------------------------------------------------------------- normalization


def test_normalize_range_edges():
    assert normalize_angle(math.pi / 2) == pytest.approx(-math.pi / 2)
    assert normalize_angle(-math.pi / 2) == pytest.approx(-math.pi / 2)
    assert normalize_angle(0.0) == 0.0


@given(angles)
def test_normalize_idempotent_and_in_range(t):
    n = normalize_angle(t)
    assert -math.pi / 2 <= n < math.pi / 2
    assert normalize_angle(n) == n


@given(rects)
def test_rect_normalize_pi_symmetry(r):
    flipped = GraspRect(r.x, r.y, r.theta + math.pi, r.w, r.h)
    assert angle_diff(rect_normalize(flipped).theta, r.theta) < 1e-9
    assert rect_normalize(r) == r


def test_nonpositive_extent_rejected():
    with pytest.raises(GeometryError):
        GraspRect(0, 0, 0, 0.0, 1.0)
    with pytest.raises(GeometryError):
        GraspRect(0, 0, 0, 1.0, -2.0)


# ---------------------------------------------------------------- vertices


def test_unit_square_from_vertices():
    v = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    r = rect_from_vertices(v)
    assert r.as_tuple() == pytest.approx((0, 0, 0, 1, 1))


def test_rotated_square_from_vertices():
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    base = np.array([(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)])
    v = base @ np.array([[c, s], [-s, c]])
    assert rect_from_vertices(v).theta == pytest.approx(math.pi / 4)


def test_vertex_round_trip_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = GraspRect(*rng.uniform(0, 300, 2), rng.uniform(-math.pi, math.pi), *rng.uniform(1, 80, 2))
        v = vertices_from_rect(r)
        back = vertices_from_rect(rect_from_vertices(v))
        # same corner set, any cyclic order
        d = np.linalg.norm(v[:, None, :] - back[None, :, :], axis=2)
        assert d.min(axis=1).max() < 1e-4


def test_non_parallelogram_rejected():
    with pytest.raises(GeometryError):
        rect_from_vertices([(0, 0), (10, 0), (10, 10), (3, 12)])


def test_degenerate_rejected():
    with pytest.raises(GeometryError):
        rect_from_vertices([(0, 0), (10, 0), (20, 0), (10, 0)])


# ---------------------------------------------------------------- angles


def test_angle_diff_examples():
    assert angle_diff(0, math.pi) == pytest.approx(0, abs=1e-12)
    assert angle_diff(0, math.pi / 2) == pytest.approx(math.pi / 2)
    assert angle_diff(0.1, -0.1) == pytest.approx(0.2)


@given(angles, angles, angles)
def test_angle_diff_properties(a, b, c):
    d = angle_diff(a, b)
    assert 0 <= d <= math.pi / 2 + 1e-12
    assert angle_diff(a + math.pi, b) == pytest.approx(d, abs=1e-9)
    assert angle_diff(a, b) <= angle_diff(a, c) + angle_diff(c, b) + 1e-9


# ---------------------------------------------------------------- IoU


def test_iou_identity_and_half_shift():
    g = GraspRect(3, 4, 0.7, 5, 2)
    assert rotated_iou(g, g) == pytest.approx(1.0)
    a, b = GraspRect(0, 0, 0, 1, 1), GraspRect(0.5, 0, 0, 1, 1)
    assert rotated_iou(a, b) == pytest.approx(1 / 3)


def test_iou_disjoint_and_contained():
    assert rotated_iou(GraspRect(0, 0, 0, 1, 1), GraspRect(5, 5, 0, 1, 1)) == 0.0
    assert rotated_iou(GraspRect(0, 0, 0.3, 4, 4), GraspRect(0, 0, 0.3, 2, 2)) == pytest.approx(0.25)


@settings(max_examples=200)
@given(rects, rects, st.floats(-math.pi, math.pi), coords, coords)
def test_iou_symmetric_and_rigid_invariant(a, b, phi, tx, ty):
    iou = rotated_iou(a, b)
    assert 0 <= iou <= 1
    assert rotated_iou(b, a) == pytest.approx(iou, abs=1e-6)
    c, s = math.cos(phi), math.sin(phi)

    def move(r):
        return GraspRect(c * r.x - s * r.y + tx, s * r.x + c * r.y + ty, r.theta + phi, r.w, r.h)

    assert rotated_iou(move(a), move(b)) == pytest.approx(iou, abs=1e-6)


def test_iou_monte_carlo_small():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_rect(rng), random_rect(rng)
        assert abs(rotated_iou(a, b) - monte_carlo_iou(a, b, 200_000, rng)) < 0.01


# ---------------------------------------------------------------- success criterion


def test_success_fixture():
    t = GraspRect(20, 20, 0.2, 10, 6)
    assert is_success(t, [t])
    off = GraspRect(20, 20, 0.2 + math.radians(35), 10, 6)
    assert not is_success(off, [t])
    quarter = GraspRect(0, 0, 0, 4, 4)
    inner = GraspRect(0, 0, 0, 2, 2)
    assert rotated_iou(quarter, inner) == 0.25
    assert not is_success(inner, [quarter])


def test_success_at_thirty_degrees_boundary():
    t = GraspRect(0, 0, 0, 10, 10)
    assert is_success(GraspRect(0, 0, math.radians(29.9), 10, 10), [t])


def test_success_empty_truths():
    with pytest.raises(ValueError):
        is_success(GraspRect(0, 0, 0, 1, 1), [])


@given(rects, st.lists(rects, min_size=1, max_size=4))
def test_success_pi_invariant(p, truths):
    flipped = GraspRect(p.x, p.y, p.theta + math.pi, p.w, p.h)
    assert is_success(p, truths) == is_success(flipped, truths)


# ---------------------------------------------------------------- heatmaps


def test_heatmap_empty():
    assert not heatmap_target([], 8, 8, 2, 3.0).grid.any()


def test_heatmap_single_cell():
    g = heatmap_target([GraspRect(5.0, 3.0, 0, 2, 2)], 8, 8, 2, 1.5).grid
    assert g.sum() == 1 and g[1, 2] == 1


def test_heatmap_matches_scan():
    rng = np.random.default_rng(3)
    for _ in range(5):
        anns = [GraspRect(*rng.uniform(0, 64, 2), 0, 4, 4) for _ in range(2)]
        got = heatmap_target(anns, 32, 32, 2, 8.0).grid
        ref = heatmap_scan([(a.x, a.y) for a in anns], 32, 32, 2, 8.0)
        np.testing.assert_array_equal(got, ref)


@given(st.floats(0, 64), st.floats(0, 64), st.floats(0.5, 10), st.floats(0, 10))
def test_heatmap_monotone_in_r(x, y, r, extra):
    a = [GraspRect(x, y, 0, 1, 1)]
    small = heatmap_target(a, 32, 32, 2, r).grid
    big = heatmap_target(a, 32, 32, 2, r + extra).grid
    assert np.all(big >= small)


def test_heatmap_rejects_bad_radius():
    with pytest.raises(ValueError):
        heatmap_target([], 4, 4, 2, 0.0)


# ---------------------------------------------------------------- peaks


def test_single_spike():
    m = np.zeros((8, 8))
    m[3, 5] = 0.9
    assert nms_peaks(Heatmap(m, 2), 0.5) == [(11.0, 7.0, 0.9)]


def test_uniform_map_has_no_peaks():
    assert nms_peaks(Heatmap(np.full((6, 6), 0.8), 2), 0.5) == []


def test_adjacent_spikes_keep_larger():
    m = np.zeros((8, 8))
    m[4, 4], m[4, 5] = 0.9, 0.7
    peaks = nms_peaks(Heatmap(m, 2), 0.5, window=3)
    assert [(p[0], p[1]) for p in peaks] == [(9.0, 9.0)]


def test_peaks_sorted_threshold_and_truncated():
    m = np.zeros((10, 10))
    for i, v in enumerate([0.4, 0.9, 0.6, 0.8]):
        m[1 + 2 * i, 1 + 2 * i] = v
    peaks = nms_peaks(Heatmap(m, 1), 0.5, max_peaks=2)
    assert [p[2] for p in peaks] == [0.9, 0.8]


def test_even_window_rejected():
    with pytest.raises(ValueError):
        nms_peaks(Heatmap(np.zeros((4, 4)), 1), 0.5, window=2)


# ---------------------------------------------------------------- text format


def test_rect_text_round_trip():
    rs = [GraspRect(10, 12, 0.4, 8, 3), GraspRect(30, 5, -1.2, 4, 9)]
    groups = parse_rect_lines(format_rect_lines(rs).splitlines())
    back = [rect_from_vertices(g) for g in groups]
    for a, b in zip(rs, back):
        assert b.as_tuple() == pytest.approx(a.as_tuple(), abs=1e-5)


def test_rect_text_bad_count_names_line():
    with pytest.raises(GeometryError, match=":3:"):
        parse_rect_lines(["0 0", "1 0", "1 1"], source="f")


def test_rect_text_bad_token():
    with pytest.raises(GeometryError, match="f:2"):
        parse_rect_lines(["0 0", "1 x"], source="f")
