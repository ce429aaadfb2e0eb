from __future__ import annotations

import numpy as np
import pytest

from clplan.config import AppConfig
from clplan.simulator.scenarios import generate_scenario
from clplan.types import (
    DT,
    FUTURE_STEPS,
    HISTORY_STEPS,
    AgentState,
    AgentTrack,
    EgoTrack,
    Lane,
    Pose2D,
    Scenario,
    ScenarioKind,
    TrafficLightState,
)

AV_BOX = (4.6, 2.0)


def _straight_lane(
    lane_id: str,
    start: tuple[float, float] = (-50.0, 0.0),
    end: tuple[float, float] = (200.0, 0.0),
    width: float = 3.5,
    speed_limit: float = 15.0,
    successors: tuple[str, ...] = (),
    spacing: float = 5.0,
    traffic_light: TrafficLightState = TrafficLightState.UNKNOWN,
) -> Lane:
    start_xy, end_xy = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    length = float(np.linalg.norm(end_xy - start_xy))
    n = max(2, int(round(length / spacing)) + 1)
    center = np.linspace(start_xy, end_xy, n)
    tangent = (end_xy - start_xy) / length
    normal = np.array([-tangent[1], tangent[0]])
    return Lane(
        id=lane_id,
        centerline=[tuple(p) for p in center],
        left_boundary=[tuple(p) for p in center + normal * width / 2],
        right_boundary=[tuple(p) for p in center - normal * width / 2],
        successors=list(successors),
        speed_limit=speed_limit,
        traffic_light=traffic_light,
    )


def _track(
    track_id: str,
    x: float,
    y: float,
    heading: float = 0.0,
    speed: float = 0.0,
    box: tuple[float, float] = AV_BOX,
    with_future: bool = True,
    ego: bool = False,
) -> AgentTrack:
    """Constant-velocity track whose current frame sits at ``(x, y)``."""
    direction = np.array([np.cos(heading), np.sin(heading)])
    velocity = tuple(direction * speed)

    def state(k: int) -> AgentState:
        px, py = np.array([x, y]) + direction * speed * k * DT
        return AgentState(pose=Pose2D(x=px, y=py, heading=heading), velocity=velocity, box=box)

    history = [state(k) for k in range(-HISTORY_STEPS + 1, 1)]
    future = [tuple(np.array([x, y]) + direction * speed * k * DT) for k in range(1, FUTURE_STEPS + 1)] if with_future else None
    cls = EgoTrack if ego else AgentTrack
    return cls(id=track_id, history=history, future_gt=future)


def _scenario(
    lanes: list[Lane] | None = None,
    av_speed: float = 10.0,
    agents: list[AgentTrack] = (),
    obstacles=(),
    route: list[str] | None = None,
) -> Scenario:
    lanes = [_straight_lane("lane_0")] if lanes is None else lanes
    return Scenario(
        av=_track("av", 0.0, 0.0, speed=av_speed, ego=True),
        agents=list(agents),
        obstacles=list(obstacles),
        lanes=lanes,
        route_lane_ids=[lane.id for lane in lanes] if route is None else route,
    )


@pytest.fixture
def make_lane():
    return _straight_lane


@pytest.fixture
def make_track():
    return _track


@pytest.fixture
def make_scenario():
    return _scenario


@pytest.fixture
def straight_scenario() -> Scenario:
    return _scenario()


@pytest.fixture
def config() -> AppConfig:
    return AppConfig()


@pytest.fixture(scope="session")
def generated():
    """Generated scenarios, cached per (kind, seed) for the session."""
    cache: dict[tuple[str, int], Scenario] = {}

    def get(kind: ScenarioKind | str, seed: int = 0) -> Scenario:
        key = (ScenarioKind(kind).value, seed)
        if key not in cache:
            cache[key] = generate_scenario(kind, seed=seed)
        return cache[key]

    return get
