"""Planar geometry helpers shared by every module.

Polylines are ``(N, 2)`` float arrays. Oriented boxes are described by their
center pose and ``(length, width)``; corner arrays have shape ``(..., 4, 2)``.
"""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import shapely
from shapely.geometry import Polygon

FloatArray = npt.NDArray[np.float64]

# Strict-overlap margin for the separating-axis test: touching boxes do not collide.
_OVERLAP_EPS = 1e-9


def normalize_angle(angle):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays."""
    angle = np.asarray(angle, dtype=np.float64)
    # in-range angles pass through untouched so wrapping is idempotent
    wrapped = np.where((angle > -np.pi) & (angle <= np.pi), angle, np.pi - np.mod(np.pi - angle, 2.0 * np.pi))
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rotate(points: FloatArray, angle: float) -> FloatArray:
    c, s = np.cos(angle), np.sin(angle)
    return np.asarray(points, dtype=np.float64) @ np.array([[c, s], [-s, c]])


def to_frame(points: FloatArray, origin: FloatArray, heading: float) -> FloatArray:
    """Express global points in the frame located at ``origin`` with ``heading``."""
    return rotate(np.asarray(points, dtype=np.float64) - origin, -heading)


def from_frame(points: FloatArray, origin: FloatArray, heading: float) -> FloatArray:
    return rotate(points, heading) + origin


def cumulative_arclength(points: FloatArray) -> FloatArray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def drop_repeated_points(points: FloatArray, tol: float = 1e-9) -> FloatArray:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return points
    keep = np.concatenate([[True], np.linalg.norm(np.diff(points, axis=0), axis=1) > tol])
    return points[keep]


def resample_polyline(points: FloatArray, n: int, length: float | None = None) -> tuple[FloatArray, FloatArray]:
    """Resample to ``n`` points uniformly spaced in arclength.

    Args:
        points: Polyline vertices.
        n: Number of output points, at least 2.
        length: Optional truncation length; defaults to the full polyline.

    Returns:
        The resampled points and their arclength coordinates.

    Raises:
        ValueError: If the polyline has zero length.
    """
    points = drop_repeated_points(points)
    s = cumulative_arclength(points)
    total = s[-1] if len(s) else 0.0
    if total <= 0.0:
        raise ValueError("polyline has zero length")
    end = total if length is None else min(length, total)
    s_new = np.linspace(0.0, end, n)
    x = np.interp(s_new, s, points[:, 0])
    y = np.interp(s_new, s, points[:, 1])
    return np.stack([x, y], axis=1), s_new


def polyline_headings(points: FloatArray) -> FloatArray:
    """Tangent headings from central differences (one-sided at the ends)."""
    d = np.gradient(points, axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


@dataclass(frozen=True)
class PolylineProjection:
    """Projection of query points onto a polyline.

    ``s`` is clamped to ``[0, length]``; ``s_raw`` continues along the end
    tangents so points past either end are distinguishable.
    """

    s: FloatArray
    s_raw: FloatArray
    d: FloatArray
    distance: FloatArray
    segment: npt.NDArray[np.int64]
    closest: FloatArray


def project_points(polyline: FloatArray, queries: FloatArray) -> PolylineProjection:
    polyline = drop_repeated_points(polyline)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    starts = polyline[:-1]
    seg = np.diff(polyline, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    s_start = np.concatenate([[0.0], np.cumsum(seg_len)])[:-1]
    total = float(s_start[-1] + seg_len[-1])

    rel = queries[:, None, :] - starts[None, :, :]
    t = np.einsum("msk,sk->ms", rel, seg) / (seg_len**2)[None, :]
    t_clamped = np.clip(t, 0.0, 1.0)
    foot = starts[None, :, :] + t_clamped[..., None] * seg[None, :, :]
    dist = np.linalg.norm(queries[:, None, :] - foot, axis=2)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(queries))

    tangent = seg[best] / seg_len[best][:, None]
    closest = foot[rows, best]
    offset = queries - closest
    d = tangent[:, 0] * offset[:, 1] - tangent[:, 1] * offset[:, 0]

    s = s_start[best] + t_clamped[rows, best] * seg_len[best]
    s_raw = s.copy()
    first, last = best == 0, best == len(seg) - 1
    before = first & (t[rows, best] < 0.0)
    after = last & (t[rows, best] > 1.0)
    s_raw[before] = t[rows, best][before] * seg_len[0]
    s_raw[after] = s_start[-1] + t[rows, best][after] * seg_len[-1]
    return PolylineProjection(
        s=np.clip(s, 0.0, total),
        s_raw=s_raw,
        d=d,
        distance=dist[rows, best],
        segment=best,
        closest=closest,
    )


def interpolate_polyline(
    polyline: FloatArray, arclength: FloatArray, s_query, extrapolate: bool = True
) -> tuple[FloatArray, FloatArray]:
    """Point and tangent heading at arclength ``s_query``.

    Beyond either end the polyline is extended straight along its end tangent
    when ``extrapolate`` is set, otherwise queries clamp to the ends.
    """
    s_query = np.atleast_1d(np.asarray(s_query, dtype=np.float64))
    idx = np.clip(np.searchsorted(arclength, s_query, side="right") - 1, 0, len(arclength) - 2)
    seg = polyline[idx + 1] - polyline[idx]
    seg_len = arclength[idx + 1] - arclength[idx]
    frac = (s_query - arclength[idx]) / seg_len
    if not extrapolate:
        frac = np.clip(frac, 0.0, 1.0)
    points = polyline[idx] + frac[:, None] * seg
    headings = np.arctan2(seg[:, 1], seg[:, 0])
    return points, headings


def box_corners(x, y, heading, length, width) -> FloatArray:
    """Corners (rear-right, rear-left, front-left, front-right) of oriented boxes.

    All arguments broadcast; the result has shape ``broadcast_shape + (4, 2)``.
    """
    x, y, heading, length, width = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (x, y, heading, length, width))
    )
    hl, hw = length / 2.0, width / 2.0
    local = np.stack(
        [
            np.stack([-hl, -hw], axis=-1),
            np.stack([-hl, hw], axis=-1),
            np.stack([hl, hw], axis=-1),
            np.stack([hl, -hw], axis=-1),
        ],
        axis=-2,
    )
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    gx = x[..., None] + local[..., 0] * c - local[..., 1] * s
    gy = y[..., None] + local[..., 0] * s + local[..., 1] * c
    return np.stack([gx, gy], axis=-1)


def boxes_overlap(corners_a: FloatArray, corners_b: FloatArray) -> npt.NDArray[np.bool_]:
    """Separating-axis test for rectangles with strictly positive overlap area.

    Inputs broadcast against each other over their leading dimensions.
    """
    corners_a, corners_b = np.broadcast_arrays(corners_a, corners_b)
    edges = np.stack(
        [
            corners_a[..., 1, :] - corners_a[..., 0, :],
            corners_a[..., 2, :] - corners_a[..., 1, :],
            corners_b[..., 1, :] - corners_b[..., 0, :],
            corners_b[..., 2, :] - corners_b[..., 1, :],
        ],
        axis=-2,
    )
    axes = edges / np.linalg.norm(edges, axis=-1, keepdims=True)
    proj_a = np.einsum("...ak,...ck->...ac", axes, corners_a)
    proj_b = np.einsum("...ak,...ck->...ac", axes, corners_b)
    overlap = (proj_a.max(axis=-1) > proj_b.min(axis=-1) + _OVERLAP_EPS) & (
        proj_b.max(axis=-1) > proj_a.min(axis=-1) + _OVERLAP_EPS
    )
    return overlap.all(axis=-1)


def corridor_polygon(left: FloatArray, right: FloatArray) -> Polygon:
    """Polygon enclosed by a left and a right boundary polyline."""
    ring = np.concatenate([np.asarray(left), np.asarray(right)[::-1]], axis=0)
    polygon = Polygon(ring)
    if not polygon.is_valid:
        polygon = shapely.make_valid(polygon)
        polygon = shapely.unary_union(
            [g for g in shapely.get_parts(polygon) if g.geom_type == "Polygon"]
        )
    return polygon


def box_polygon(x: float, y: float, heading: float, length: float, width: float) -> Polygon:
    return Polygon(box_corners(x, y, heading, length, width))
