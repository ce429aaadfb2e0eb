from __future__ import annotations

import numpy as np
import pytest
import shapely

from clplan.utils.geometry import (
    box_corners,
    box_polygon,
    boxes_overlap,
    from_frame,
    interpolate_polyline,
    normalize_angle,
    project_points,
    resample_polyline,
    to_frame,
)


def test_normalize_angle_range():
    angles = np.linspace(-10, 10, 101)
    wrapped = normalize_angle(angles)
    assert np.all(wrapped > -np.pi) and np.all(wrapped <= np.pi)
    np.testing.assert_allclose(np.cos(wrapped), np.cos(angles), atol=1e-12)
    assert normalize_angle(-np.pi) == pytest.approx(np.pi)


def test_frame_round_trip():
    rng = np.random.default_rng(0)
    points = rng.normal(size=(10, 2))
    origin, heading = np.array([3.0, -1.0]), 0.7
    np.testing.assert_allclose(from_frame(to_frame(points, origin, heading), origin, heading), points, atol=1e-12)
    np.testing.assert_allclose(to_frame(origin + [np.cos(heading), np.sin(heading)], origin, heading), [[1.0, 0.0]], atol=1e-12)


def test_resample_uniform_spacing():
    polyline = np.array([[0.0, 0.0], [3.0, 0.0], [3.0, 4.0], [3.0, 4.0], [10.0, 4.0]])
    points, s = resample_polyline(polyline, 29)
    spacing = np.linalg.norm(np.diff(points, axis=0), axis=1)
    np.testing.assert_allclose(np.diff(s), 14.0 / 28, rtol=1e-9)
    assert spacing.max() <= 0.5 + 1e-9


def test_resample_zero_length():
    with pytest.raises(ValueError):
        resample_polyline(np.zeros((3, 2)), 5)


def test_project_on_and_beside_line():
    line = np.array([[0.0, 0.0], [20.0, 0.0]])
    proj = project_points(line, [[10.0, 2.0], [5.0, 0.0], [25.0, -1.0], [-3.0, 0.0]])
    np.testing.assert_allclose(proj.s, [10.0, 5.0, 20.0, 0.0])
    np.testing.assert_allclose(proj.d, [2.0, 0.0, -1.0, 0.0])
    np.testing.assert_allclose(proj.s_raw, [10.0, 5.0, 25.0, -3.0])


def test_interpolate_extrapolates_along_end_tangent():
    line = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]])
    arclength = np.array([0.0, 10.0, 20.0])
    points, headings = interpolate_polyline(line, arclength, [5.0, 15.0, 25.0])
    np.testing.assert_allclose(points, [[5.0, 0.0], [10.0, 5.0], [10.0, 15.0]])
    np.testing.assert_allclose(headings, [0.0, np.pi / 2, np.pi / 2])
    clamped, _ = interpolate_polyline(line, arclength, [25.0], extrapolate=False)
    np.testing.assert_allclose(clamped, [[10.0, 10.0]])


def test_box_overlap_matches_shapely():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = (*rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi), *rng.uniform(0.5, 5, 2))
        b = (*rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi), *rng.uniform(0.5, 5, 2))
        expected = shapely.intersection(box_polygon(*a), box_polygon(*b)).area > 1e-6
        assert bool(boxes_overlap(box_corners(*a), box_corners(*b))) == expected


def test_touching_boxes_do_not_overlap():
    a = box_corners(0.0, 0.0, 0.0, 2.0, 2.0)
    b = box_corners(2.0, 0.0, 0.0, 2.0, 2.0)
    assert not boxes_overlap(a, b)
    assert boxes_overlap(a, box_corners(1.9, 0.0, 0.0, 2.0, 2.0))
