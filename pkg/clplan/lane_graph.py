"""Reference-line extraction over the lane successor graph, and arclength projection."""

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import shapely
from pydantic import BaseModel, ConfigDict, Field
from shapely.geometry import Polygon

from clplan.types import InputError, Lane, Scenario
from clplan.utils.geometry import (
    corridor_polygon,
    cumulative_arclength,
    drop_repeated_points,
    interpolate_polyline,
    polyline_headings,
    project_points,
    resample_polyline,
)

logger = logging.getLogger(__name__)

_SAME_GEOMETRY_TOL = 1e-9
# Shortest trimmed path still worth turning into a reference line.
_MIN_LINE_LENGTH = 1e-3


class LaneGraphConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    r_ref: float = Field(120.0, gt=0, description="Search radius around the AV for DFS start lanes (m) [decision]")
    length: float = Field(120.0, gt=0, description="Reference-line truncation length (m) [decision]")
    n_points: int = Field(120, ge=2, description="Points per resampled reference line [decision]")
    max_start_offset: float = Field(
        5.0, gt=0, description="Planner ignores lines starting farther than this from the AV (m) [decision]"
    )
    max_heading_offset: float = Field(
        1.5708, gt=0, description="Planner ignores lines whose start heading differs more than this from the AV's (rad) [decision]"
    )


@dataclass(frozen=True)
class ReferenceLine:
    points: npt.NDArray[np.float64]
    headings: npt.NDArray[np.float64]
    arclength: npt.NDArray[np.float64]
    source_lane_ids: tuple[str, ...]
    # Arclength at which each source lane begins along this line.
    lane_offsets: tuple[float, ...] = ()

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def interpolate(self, s, extrapolate: bool = True) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        return interpolate_polyline(self.points, self.arclength, s, extrapolate=extrapolate)


def _centerline(lane: Lane) -> npt.NDArray[np.float64]:
    return drop_repeated_points(lane.centerline_array)


def _chain(lanes_by_id: dict[str, Lane], lane_ids: list[str]) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Concatenated centerline of a lane sequence and the arclength where each lane starts."""
    pieces = [_centerline(lanes_by_id[lane_id]) for lane_id in lane_ids]
    first_index = np.cumsum([0] + [len(p) for p in pieces[:-1]])
    joined = np.vstack(pieces)
    starts = cumulative_arclength(joined)[first_index]
    return drop_repeated_points(joined), starts


def _dfs_paths(
    lanes_by_id: dict[str, Lane], root: str, budget: float, visited: set[str]
) -> list[list[str]]:
    paths: list[list[str]] = []
    stack: list[tuple[list[str], float]] = [([root], float(cumulative_arclength(_centerline(lanes_by_id[root]))[-1]))]
    while stack:
        path, travelled = stack.pop()
        visited.add(path[-1])
        successors = [] if travelled >= budget else [s for s in lanes_by_id[path[-1]].successors if s not in path]
        if not successors:
            paths.append(path)
            continue
        # Reverse so the smallest successor id is expanded first.
        for succ in sorted(successors, reverse=True):
            seg = float(cumulative_arclength(_centerline(lanes_by_id[succ]))[-1])
            stack.append(([*path, succ], travelled + seg))
    return paths


def find_reference_lines(scenario: Scenario, r_ref: float = 120.0, length: float = 120.0, n_pts: int = 120) -> list[ReferenceLine]:
    """Enumerate reference lines by depth-first search over successor links.

    Lanes whose centerline passes within ``r_ref`` of the AV are candidates;
    search starts at candidates with no candidate predecessor. Each maximal
    path is trimmed to begin at its point nearest the AV, truncated to
    ``length`` and resampled to ``n_pts`` points. Paths covering the same
    lane sequence (or producing identical geometry) collapse to the one with
    the lexicographically smallest full lane-id sequence.

    Returns:
        Reference lines sorted by covered lane-id sequence; empty when no
        lane is in range.
    """
    if r_ref <= 0 or length <= 0 or n_pts < 2:
        raise InputError(f"invalid reference-line parameters r_ref={r_ref}, length={length}, n_pts={n_pts}")

    av_xy = scenario.av_state.pose.xy
    lanes_by_id = {lane.id: lane for lane in scenario.lanes if len(_centerline(lane)) >= 2}

    distance: dict[str, float] = {}
    for lane_id, lane in lanes_by_id.items():
        d = float(project_points(_centerline(lane), av_xy).distance[0])
        if d <= r_ref:
            distance[lane_id] = d
    if not distance:
        return []

    has_candidate_pred = {succ for lane_id in distance for succ in lanes_by_id[lane_id].successors if succ in distance}
    order = sorted(distance, key=lambda lane_id: (distance[lane_id], lane_id))
    roots = [lane_id for lane_id in order if lane_id not in has_candidate_pred]

    visited: set[str] = set()
    paths: list[list[str]] = []
    for root in roots:
        paths.extend(_dfs_paths(lanes_by_id, root, _root_budget(lanes_by_id[root], r_ref, length), visited))
    # Candidates only reachable through a cycle have no root of their own.
    for lane_id in order:
        if lane_id not in visited:
            paths.extend(_dfs_paths(lanes_by_id, lane_id, _root_budget(lanes_by_id[lane_id], r_ref, length), visited))

    kept: dict[tuple[str, ...], tuple[list[str], ReferenceLine]] = {}
    for path in paths:
        line = _trimmed_line(lanes_by_id, path, av_xy, length, n_pts)
        if line is None:
            continue
        key = line.source_lane_ids
        duplicate = next(
            (
                k
                for k, (_, other) in kept.items()
                if k == key
                or (other.points.shape == line.points.shape and np.allclose(other.points, line.points, rtol=0.0, atol=_SAME_GEOMETRY_TOL))
            ),
            None,
        )
        if duplicate is None:
            kept[key] = (path, line)
        elif path < kept[duplicate][0]:
            del kept[duplicate]
            kept[key] = (path, line)

    lines = [line for _, (_, line) in sorted(kept.items())]
    logger.debug(f"{len(lines)} reference lines from {len(paths)} DFS paths")
    return lines


def _root_budget(root: Lane, r_ref: float, length: float) -> float:
    return float(cumulative_arclength(_centerline(root))[-1]) + 2.0 * r_ref + length


def _trimmed_line(
    lanes_by_id: dict[str, Lane], path: list[str], av_xy: npt.NDArray[np.float64], length: float, n_pts: int
) -> ReferenceLine | None:
    polyline, lane_starts = _chain(lanes_by_id, path)
    s_full = cumulative_arclength(polyline)
    s0 = float(project_points(polyline, av_xy).s[0])
    end = min(s0 + length, float(s_full[-1]))
    if end - s0 < _MIN_LINE_LENGTH:
        return None

    start_pt, _ = interpolate_polyline(polyline, s_full, s0, extrapolate=False)
    inner = polyline[(s_full > s0) & (s_full < end)]
    end_pt, _ = interpolate_polyline(polyline, s_full, end, extrapolate=False)
    points, arclength = resample_polyline(np.vstack([start_pt, inner, end_pt]), n_pts)

    lane_ends = np.append(lane_starts[1:], s_full[-1])
    covered = [
        (lane_id, max(float(a) - s0, 0.0))
        for lane_id, a, b in zip(path, lane_starts, lane_ends)
        if b > s0 + 1e-9 and a < end - 1e-9
    ]
    return ReferenceLine(
        points=points,
        headings=polyline_headings(points),
        arclength=arclength,
        source_lane_ids=tuple(lane_id for lane_id, _ in covered),
        lane_offsets=tuple(offset for _, offset in covered),
    )


def project(ref: ReferenceLine, point) -> tuple[float, float]:
    """Arclength (clamped to the line) and signed lateral offset, positive to the left."""
    proj = project_points(ref.points, np.asarray(point, dtype=np.float64))
    return float(proj.s[0]), float(proj.d[0])


def route_centerline(scenario: Scenario) -> npt.NDArray[np.float64] | None:
    """Centerline of the route lane chain, starting at the route lane nearest the AV."""
    lanes_by_id = scenario.lanes_by_id
    route = [r for r in scenario.route_lane_ids if len(_centerline(lanes_by_id[r])) >= 2]
    if not route:
        return None
    av_xy = scenario.av_state.pose.xy
    start = min(route, key=lambda r: (float(project_points(_centerline(lanes_by_id[r]), av_xy).distance[0]), r))
    chain, route_set = [start], set(route)
    while True:
        nxt = sorted(s for s in lanes_by_id[chain[-1]].successors if s in route_set and s not in chain)
        if not nxt:
            break
        chain.append(nxt[0])
    polyline, _ = _chain(lanes_by_id, chain)
    return polyline


def lane_polygon(lane: Lane) -> Polygon:
    return corridor_polygon(np.asarray(lane.left_boundary), np.asarray(lane.right_boundary))


def drivable_area(lanes: list[Lane]):
    """Union of every lane polygon; an empty geometry when there are no lanes."""
    polygons = [lane_polygon(lane) for lane in lanes]
    if not polygons:
        return shapely.GeometryCollection()
    return shapely.unary_union(polygons)
