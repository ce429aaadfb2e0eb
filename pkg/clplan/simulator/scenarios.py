"""Parametric scenario generators.

Every generator lays out lanes, then synthesizes the logged traffic (AV
expert included) by a joint IDM simulation along fixed paths, so logs are
kinematically plausible and collision-free. Unset parameters are sampled
from the seed; the draw sequence does not depend on which parameters are
set, so overriding one parameter leaves the others unchanged.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from clplan.proposer import IdmParams
from clplan.simulator.traffic import Body, PathTraffic, PathVehicle
from clplan.types import (
    DT,
    FUTURE_STEPS,
    HISTORY_STEPS,
    AgentKind,
    AgentState,
    AgentTrack,
    EgoTrack,
    InputError,
    Lane,
    Pose2D,
    Scenario,
    ScenarioKind,
    ScenarioMetadata,
    StaticObstacle,
    TrafficLightState,
)
from clplan.utils.geometry import cumulative_arclength, interpolate_polyline, polyline_headings

logger = logging.getLogger(__name__)

_ROUND = 4
_ROAD_END = 420.0
_ROAD_START = -60.0


class GeneratorParams(BaseModel):
    """Scenario knobs; ``None`` draws the value from the seed within the documented range."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_ticks: int = Field(150, ge=FUTURE_STEPS, description="Logged ticks after the current frame [method]")
    lane_width: float = Field(3.5, gt=0, description="(m) [decision]")
    segment_length: float = Field(30.0, gt=0, description="Length of generated lane pieces (m) [decision]")
    av_length: float = Field(4.6, gt=0, description="(m) [decision]")
    av_width: float = Field(2.0, gt=0, description="(m) [decision]")
    speed_limit: float | None = Field(None, gt=0, description="Road speed limit, drawn from [10, 15] m/s [decision]")
    av_speed: float | None = Field(None, ge=0, description="AV speed at the start of its history (m/s) [decision]")
    lead_distance: float | None = Field(None, gt=0, description="Stopped lead center ahead of the AV, [25, 45] m [decision]")
    obstacle_distance: float | None = Field(None, gt=0, description="Blocking obstacle ahead of the AV, [40, 60] m [decision]")
    stop_line_distance: float | None = Field(None, gt=0, description="Red-light stop line ahead of the AV, [30, 60] m [decision]")
    turn_radius: float | None = Field(None, ge=10, description="Left-turn connector radius, [10, 15] m [decision]")
    oncoming_arrival: float | None = Field(None, ge=0, description="Oncoming car reaches the conflict point, [2, 5] s [decision]")
    lane_end_distance: float | None = Field(None, gt=0, description="AV lane ends this far ahead, [70, 110] m [decision]")


@dataclass
class _Layout:
    lanes: list[Lane]
    route: list[str]
    av: PathVehicle
    agents: list[tuple[PathVehicle, AgentKind]] = field(default_factory=list)
    obstacles: list[StaticObstacle] = field(default_factory=list)
    # Per-frame extra stop arclength for each vehicle (AV first).
    holds: Callable[[PathTraffic], list[float | None]] | None = None


def _draw(rng: np.random.Generator, value: float | None, low: float, high: float) -> float:
    sample = float(rng.uniform(low, high))
    return sample if value is None else float(value)


def _straight(start: tuple[float, float], end: tuple[float, float], spacing: float = 5.0) -> npt.NDArray[np.float64]:
    start_arr, end_arr = np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64)
    n = max(2, int(np.ceil(np.linalg.norm(end_arr - start_arr) / spacing)) + 1)
    return np.linspace(start_arr, end_arr, n)


def _lane(
    lane_id: str,
    centerline: npt.NDArray[np.float64],
    speed_limit: float,
    width: float,
    successors: list[str] | None = None,
    light: TrafficLightState = TrafficLightState.UNKNOWN,
) -> Lane:
    headings = polyline_headings(centerline)
    normal = np.stack([-np.sin(headings), np.cos(headings)], axis=-1) * (width / 2.0)
    return Lane(
        id=lane_id,
        centerline=np.round(centerline, _ROUND).tolist(),
        left_boundary=np.round(centerline + normal, _ROUND).tolist(),
        right_boundary=np.round(centerline - normal, _ROUND).tolist(),
        successors=successors or [],
        speed_limit=round(speed_limit, _ROUND),
        traffic_light=light,
    )


def _split_lanes(
    prefix: str,
    polyline: npt.NDArray[np.float64],
    speed_limit: float,
    params: GeneratorParams,
    successor: str | None = None,
) -> list[Lane]:
    """Cut ``polyline`` into chained lanes of ``segment_length``; the last one links to ``successor``."""
    arclength = cumulative_arclength(polyline)
    total = float(arclength[-1])
    n = max(1, int(np.ceil(total / params.segment_length - 1e-9)))
    ids = [f"{prefix}{k:02d}" for k in range(n)]
    lanes = []
    for k, lane_id in enumerate(ids):
        lo, hi = k * params.segment_length, min((k + 1) * params.segment_length, total)
        inner = arclength[(arclength > lo) & (arclength < hi)]
        s = np.concatenate([[lo], inner, [hi]])
        points, _ = interpolate_polyline(polyline, arclength, s, extrapolate=False)
        nxt = ids[k + 1] if k + 1 < n else successor
        lanes.append(_lane(lane_id, points, speed_limit, params.lane_width, [nxt] if nxt else None))
    return lanes


def _smooth_lane_change(x: npt.NDArray[np.float64], start: float, length: float, offset: float) -> npt.NDArray[np.float64]:
    u = np.clip((x - start) / length, 0.0, 1.0)
    return np.stack([x, offset * (3 * u**2 - 2 * u**3)], axis=-1)


def _history_start(s_now: float, v: float) -> float:
    return s_now - v * (HISTORY_STEPS - 1) * DT


def _av_vehicle(path, s_now: float, v: float, limits, params: GeneratorParams, stops=None) -> PathVehicle:
    return PathVehicle(
        id="av",
        path=path,
        s=_history_start(s_now, v),
        v=v,
        box=(params.av_length, params.av_width),
        limits=limits,
        stops=stops or [],
    )


def _straight_cruise(rng: np.random.Generator, params: GeneratorParams) -> _Layout:
    limit = _draw(rng, params.speed_limit, 10.0, 15.0)
    v0 = _draw(rng, params.av_speed, 0.7 * limit, limit)
    road = _straight((_ROAD_START, 0.0), (_ROAD_END, 0.0))
    lane = _lane("lane_0", road, limit, params.lane_width)
    av = _av_vehicle(road, -_ROAD_START, v0, [(0.0, limit)], params)
    return _Layout(lanes=[lane], route=[lane.id], av=av)


def _stopped_lead(rng: np.random.Generator, params: GeneratorParams) -> _Layout:
    limit = _draw(rng, params.speed_limit, 10.0, 15.0)
    v0 = _draw(rng, params.av_speed, 5.0, 8.0)
    distance = _draw(rng, params.lead_distance, 25.0, 45.0)
    road = _straight((_ROAD_START, 0.0), (_ROAD_END, 0.0))
    lanes = _split_lanes("lane_", road, limit, params)
    av = _av_vehicle(road, -_ROAD_START, v0, [(0.0, limit)], params)
    lead = PathVehicle(
        id="lead", path=road, s=-_ROAD_START + distance, v=0.0, box=(4.6, 2.0), limits=[(0.0, limit)], static=True
    )
    return _Layout(lanes=lanes, route=[lane.id for lane in lanes], av=av, agents=[(lead, AgentKind.VEHICLE)])


def _lane_blocked(rng: np.random.Generator, params: GeneratorParams) -> _Layout:
    limit = _draw(rng, params.speed_limit, 10.0, 15.0)
    v0 = _draw(rng, params.av_speed, 6.0, 10.0)
    distance = _draw(rng, params.obstacle_distance, 40.0, 60.0)
    w = params.lane_width
    right = _split_lanes("right_", _straight((_ROAD_START, 0.0), (_ROAD_END, 0.0)), limit, params)
    left = _split_lanes("left_", _straight((_ROAD_START, w), (_ROAD_END, w)), limit, params)
    path = _smooth_lane_change(np.arange(_ROAD_START, _ROAD_END + 1.0, 1.0), distance - 35.0, 25.0, w)
    av = _av_vehicle(path, -_ROAD_START, v0, [(0.0, limit)], params)
    obstacle = StaticObstacle(id="obstacle", pose=Pose2D(x=round(distance, _ROUND), y=0.0), box=(5.0, 2.2))
    lanes = right + left
    return _Layout(lanes=lanes, route=[lane.id for lane in lanes], av=av, obstacles=[obstacle])


def _red_light(rng: np.random.Generator, params: GeneratorParams) -> _Layout:
    limit = _draw(rng, params.speed_limit, 10.0, 15.0)
    v0 = _draw(rng, params.av_speed, 6.0, 10.0)
    stop_line = _draw(rng, params.stop_line_distance, 30.0, 60.0)
    cross_speed = _draw(rng, None, 8.0, 11.0)
    cross_start = _draw(rng, None, -70.0, -40.0)

    box_half = 10.0
    approach = _split_lanes("approach_", _straight((_ROAD_START, 0.0), (stop_line, 0.0)), limit, params, "junction_in")
    junction = _lane(
        "junction_in",
        _straight((stop_line, 0.0), (stop_line + 2 * box_half, 0.0)),
        limit,
        params.lane_width,
        ["exit_00"],
        TrafficLightState.RED,
    )
    exit_lanes = _split_lanes("exit_", _straight((stop_line + 2 * box_half, 0.0), (_ROAD_END, 0.0)), limit, params)

    cross_x = stop_line + box_half
    cross_approach = _split_lanes("cross_in_", _straight((cross_x, -80.0), (cross_x, -box_half)), limit, params, "cross_junction")
    cross_junction = _lane(
        "cross_junction",
        _straight((cross_x, -box_half), (cross_x, box_half)),
        limit,
        params.lane_width,
        ["cross_out_00"],
        TrafficLightState.GREEN,
    )
    cross_exit = _split_lanes("cross_out_", _straight((cross_x, box_half), (cross_x, 200.0)), limit, params)

    road = _straight((_ROAD_START, 0.0), (_ROAD_END, 0.0))
    av = _av_vehicle(road, -_ROAD_START, v0, [(0.0, limit)], params, stops=[stop_line - _ROAD_START])
    cross_path = _straight((cross_x, -80.0), (cross_x, 200.0))
    cross = PathVehicle(
        id="cross",
        path=cross_path,
        s=cross_start + 80.0,
        v=cross_speed,
        box=(4.6, 2.0),
        limits=[(0.0, cross_speed)],
    )
    lanes = [*approach, junction, *exit_lanes, *cross_approach, cross_junction, *cross_exit]
    route = [lane.id for lane in (*approach, junction, *exit_lanes)]
    return _Layout(lanes=lanes, route=route, av=av, agents=[(cross, AgentKind.VEHICLE)])


def _unprotected_left(rng: np.random.Generator, params: GeneratorParams) -> _Layout:
    limit = _draw(rng, params.speed_limit, 10.0, 15.0)
    radius = _draw(rng, params.turn_radius, 10.0, 15.0)
    approach_distance = _draw(rng, None, 25.0, 40.0)
    arrival = _draw(rng, params.oncoming_arrival, 2.0, 5.0)
    oncoming_speed = _draw(rng, None, 0.7 * limit, 0.9 * limit)
    # Lateral acceleration on the connector stays near 3 m/s^2.
    turn_limit = float(min(limit, np.sqrt(3.0 * radius)))
    v0 = _draw(rng, params.av_speed, 0.7 * turn_limit, turn_limit)
    w = params.lane_width

    phi = np.linspace(0.0, np.pi / 2.0, int(np.ceil(radius * np.pi / 2.0)) + 1)
    arc = np.stack([radius * np.sin(phi), radius * (1.0 - np.cos(phi))], axis=-1)
    approach_line = _straight((-approach_distance + _ROAD_START, 0.0), (0.0, 0.0))
    exit_line = _straight((radius, radius), (radius, radius + 250.0))

    approach = _split_lanes("approach_", approach_line, turn_limit, params, "turn_left")
    turn = _lane("turn_left", arc, turn_limit, w, ["exit_00"])
    exit_lanes = _split_lanes("exit_", exit_line, limit, params)
    oncoming_line = _straight((250.0, w), (-250.0, w))
    oncoming_lanes = _split_lanes("oncoming_", oncoming_line, limit, params)

    path = np.vstack([approach_line, arc[1:], exit_line[1:]])
    entry_s = float(cumulative_arclength(approach_line)[-1])
    exit_s = entry_s + float(cumulative_arclength(arc)[-1])
    av = _av_vehicle(path, entry_s - approach_distance, v0, [(0.0, turn_limit), (exit_s, limit)], params)

    # The arc crosses the oncoming lane center at x_conflict.
    x_conflict = radius * np.sin(np.arccos(1.0 - w / radius))
    x_start = x_conflict + oncoming_speed * (arrival + (HISTORY_STEPS - 1) * DT)
    oncoming = PathVehicle(
        id="oncoming",
        path=oncoming_line,
        s=250.0 - x_start,
        v=oncoming_speed,
        box=(4.6, 2.0),
        limits=[(0.0, oncoming_speed)],
    )
    clear_x = x_conflict - (oncoming.box[0] + params.av_width) / 2.0 - 4.0

    def holds(traffic: PathTraffic) -> list[float | None]:
        ego, other = traffic.vehicles[0], traffic.vehicles[1]
        ox, _, _ = other.pose()
        waiting = ox > clear_x and ego.s + ego.box[0] / 2.0 < entry_s
        return [entry_s if waiting else None, None]

    lanes = [*approach, turn, *exit_lanes, *oncoming_lanes]
    route = [lane.id for lane in (*approach, turn, *exit_lanes)]
    return _Layout(lanes=lanes, route=route, av=av, agents=[(oncoming, AgentKind.VEHICLE)], holds=holds)


def _lane_change(rng: np.random.Generator, params: GeneratorParams) -> _Layout:
    limit = _draw(rng, params.speed_limit, 10.0, 15.0)
    v0 = _draw(rng, params.av_speed, 0.6 * limit, 0.8 * limit)
    lane_end = _draw(rng, params.lane_end_distance, 70.0, 110.0)
    change_start = _draw(rng, None, 10.0, lane_end - 50.0)
    lead_x = _draw(rng, None, 20.0, 40.0)
    lead_speed = _draw(rng, None, 0.7 * limit, 0.85 * limit)
    w = params.lane_width

    right = _split_lanes("right_", _straight((_ROAD_START, 0.0), (lane_end, 0.0)), limit, params)
    left = _split_lanes("left_", _straight((_ROAD_START, w), (_ROAD_END, w)), limit, params)
    path = _smooth_lane_change(np.arange(_ROAD_START, _ROAD_END + 1.0, 1.0), change_start, 30.0, w)
    av = _av_vehicle(path, -_ROAD_START, v0, [(0.0, limit)], params)
    left_road = _straight((_ROAD_START, w), (_ROAD_END, w))
    lead = PathVehicle(
        id="lead",
        path=left_road,
        s=_history_start(lead_x - _ROAD_START, lead_speed),
        v=lead_speed,
        box=(4.6, 2.0),
        limits=[(0.0, lead_speed)],
    )
    lanes = right + left
    return _Layout(lanes=lanes, route=[lane.id for lane in lanes], av=av, agents=[(lead, AgentKind.VEHICLE)])


_GENERATORS: dict[ScenarioKind, Callable[[np.random.Generator, GeneratorParams], _Layout]] = {
    ScenarioKind.STRAIGHT_CRUISE: _straight_cruise,
    ScenarioKind.STOPPED_LEAD: _stopped_lead,
    ScenarioKind.LANE_BLOCKED: _lane_blocked,
    ScenarioKind.RED_LIGHT: _red_light,
    ScenarioKind.UNPROTECTED_LEFT: _unprotected_left,
    ScenarioKind.LANE_CHANGE: _lane_change,
}


def _drive(layout: _Layout, n_frames: int, idm: IdmParams) -> list[npt.NDArray[np.float64]]:
    """Per-vehicle ``(n_frames, 5)`` logs of ``x, y, heading, vx, vy``."""
    vehicles = [layout.av, *(vehicle for vehicle, _ in layout.agents)]
    traffic = PathTraffic(vehicles, idm)
    obstacles = [Body(o.pose.x, o.pose.y, 0.0, 0.0, o.box[0], o.box[1]) for o in layout.obstacles]
    logs = [np.empty((n_frames, 5)) for _ in vehicles]
    for frame in range(n_frames):
        for log, vehicle in zip(logs, vehicles):
            x, y, heading = vehicle.pose()
            log[frame] = (x, y, heading, vehicle.v * np.cos(heading), vehicle.v * np.sin(heading))
        holds = layout.holds(traffic) if layout.holds else None
        traffic.step(DT, obstacles, holds)
    return logs


def _states(log: npt.NDArray[np.float64], box: tuple[float, float]) -> list[AgentState]:
    rows = np.round(log, _ROUND)
    return [
        AgentState(pose=Pose2D(x=x, y=y, heading=heading), velocity=(vx, vy), box=box) for x, y, heading, vx, vy in rows.tolist()
    ]


def _track_fields(log: npt.NDArray[np.float64], box: tuple[float, float]) -> dict:
    states = _states(log, box)
    replay = states[HISTORY_STEPS - 1 :]
    return dict(
        history=states[:HISTORY_STEPS],
        replay=replay,
        future_gt=[(s.pose.x, s.pose.y) for s in replay[1 : FUTURE_STEPS + 1]],
    )


def generate_scenario(
    kind: ScenarioKind | str, params: GeneratorParams | None = None, seed: int = 0, idm: IdmParams | None = None
) -> Scenario:
    """Deterministic scenario of ``kind``; the same seed and parameters give an identical document."""
    try:
        kind = ScenarioKind(kind)
    except ValueError:
        raise InputError(f"unknown scenario kind {kind!r}; choose from {[k.value for k in ScenarioKind]}") from None
    params = params or GeneratorParams()
    idm = idm or IdmParams()
    rng = np.random.default_rng(seed)
    layout = _GENERATORS[kind](rng, params)

    n_frames = HISTORY_STEPS + params.n_ticks
    logs = _drive(layout, n_frames, idm)
    av_log = logs[0]
    speeds = np.hypot(av_log[:, 3], av_log[:, 4])
    av = EgoTrack(
        id="av",
        **_track_fields(av_log, layout.av.box),
        acceleration=round(float(speeds[HISTORY_STEPS - 1] - speeds[HISTORY_STEPS - 2]) / DT, _ROUND),
    )
    agents = [
        AgentTrack(id=vehicle.id, kind=agent_kind, **_track_fields(log, vehicle.box))
        for (vehicle, agent_kind), log in zip(layout.agents, logs[1:])
    ]
    scenario = Scenario(
        metadata=ScenarioMetadata(id=f"{kind.value}_{seed:04d}", kind=kind.value, seed=seed),
        dt=DT,
        av=av,
        agents=agents,
        obstacles=layout.obstacles,
        lanes=layout.lanes,
        route_lane_ids=layout.route,
    )
    logger.debug(f"Generated {scenario.metadata.id}: {len(scenario.lanes)} lanes, {len(agents)} agents")
    return scenario


def generate_suite(
    kinds: list[ScenarioKind | str],
    count: int,
    seed: int = 0,
    params: GeneratorParams | None = None,
    idm: IdmParams | None = None,
) -> list[Scenario]:
    """``count`` scenarios per kind with seeds ``seed, seed + 1, ...``."""
    if count < 1:
        raise InputError(f"count must be positive, got {count}")
    return [generate_scenario(kind, params, seed + i, idm) for kind in kinds for i in range(count)]
