"""Closed-loop episode execution.

Every tick the planner sees a 2 s observation window, the tracker turns the
returned trajectory into one control, the bicycle model moves the AV and the
agents advance under the chosen policy: log replay (non-reactive) or IDM
along their logged paths (reactive).
"""

import logging
from abc import ABC, abstractmethod
from collections import deque
from typing import Literal

import numpy as np
import numpy.typing as npt
import shapely
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from clplan.control import TrackerParams, TrackingReference, VehicleParams, step_states, track
from clplan.metrics import (
    CollisionRecord,
    EgoTrace,
    MapContext,
    MetricReport,
    MetricsConfig,
    ObjectTrace,
    evaluate_episode,
    find_collisions,
)
from clplan.planner import Planner
from clplan.postprocess import PlanningDiagnostics
from clplan.proposer import IdmParams
from clplan.scene import ScenarioDocument
from clplan.simulator.traffic import Body, PathTraffic, PathVehicle
from clplan.types import (
    FUTURE_STEPS,
    HISTORY_STEPS,
    AgentKind,
    AgentPolicy,
    AgentState,
    AgentTrack,
    EgoTrack,
    EpisodeError,
    Point,
    Pose2D,
    Scenario,
    ScenarioParseError,
    TrafficLightState,
    X,
    Y,
)
from clplan.utils.geometry import cumulative_arclength, drop_repeated_points, normalize_angle, project_points

logger = logging.getLogger(__name__)

SIMLOG_VERSION = 1
# Agents whose logged top speed stays below this never move under IDM.
_STATIC_SPEED = 0.1


class SimulatorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_ticks: int = Field(150, ge=1, description="Episode length at 10 Hz [method]")
    policy: AgentPolicy = Field(AgentPolicy.NON_REACTIVE, description="Agent policy [method]")
    record_diagnostics: bool = Field(True, description="Keep per-cycle selection diagnostics in the log [decision]")
    snapshot_every: int = Field(10, ge=0, description="Store proposals every N ticks for rendering, 0 disables [decision]")
    terminate_on_collision: bool = Field(False, description="Stop the episode at the first at-fault collision [decision]")
    reactive_margin: float = Field(0.3, ge=0, description="Lateral clearance for reactive-agent leaders (m) [decision]")


## Log format


class AvFrame(BaseModel):
    """AV state at ``tick`` and the control applied from it."""

    model_config = ConfigDict(frozen=True)

    tick: int
    x: float
    y: float
    heading: float
    speed: float
    accel: float = 0.0
    steering: float = 0.0


class AgentFrames(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str
    kind: AgentKind
    box: tuple[float, float]
    x: list[float]
    y: list[float]
    heading: list[float]
    vx: list[float]
    vy: list[float]
    valid: list[bool]


class SimEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int
    kind: Literal["collision", "off_road", "emergency_stop", "planner_failure"]
    object_id: str | None = None
    at_fault: bool | None = None
    detail: str | None = None


class CycleRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int
    selected: list[Point]
    diagnostics: PlanningDiagnostics | None = None
    proposals: list[list[Point]] | None = None
    reference_lines: list[list[Point]] | None = None


class SimLog(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: Literal[1] = SIMLOG_VERSION
    scenario: ScenarioDocument
    planner: str
    policy: AgentPolicy
    seed: int
    dt: float
    av: list[AvFrame]
    agents: list[AgentFrames]
    events: list[SimEvent] = Field(default_factory=list)
    cycles: list[CycleRecord] = Field(default_factory=list)
    failed: bool = False
    failure: str | None = None

    @property
    def n_ticks(self) -> int:
        return len(self.av) - 1

    @property
    def emergency_stops(self) -> int:
        return sum(1 for event in self.events if event.kind == "emergency_stop")

    def ego_trace(self) -> EgoTrace:
        frames = np.array([[f.x, f.y, f.heading, f.speed] for f in self.av], dtype=np.float64)
        length, width = self.scenario.av.box
        return EgoTrace(xy=frames[:, :2], heading=frames[:, 2], speed=frames[:, 3], length=length, width=width, dt=self.dt)

    def object_trace(self) -> ObjectTrace:
        n_ticks = len(self.av)
        rows = np.array([[a.x, a.y, a.heading, a.vx, a.vy] for a in self.agents], dtype=np.float64)
        rows = rows.reshape(-1, 5, n_ticks).transpose(0, 2, 1)
        valid = np.array([a.valid for a in self.agents], dtype=bool).reshape(-1, n_ticks)
        agents = _agent_trace([a.id for a in self.agents], [a.box for a in self.agents], rows, valid)
        return agents.concat(_obstacle_trace(self.scenario.obstacles, n_ticks))


def _agent_trace(ids, boxes, rows: npt.NDArray[np.float64], valid: npt.NDArray[np.bool_]) -> ObjectTrace:
    """Objects from ``(N, T, 5)`` rows of ``x, y, heading, vx, vy``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    return ObjectTrace(
        ids=tuple(ids),
        xy=rows[..., :2],
        heading=rows[..., 2],
        velocity=rows[..., 3:5],
        length=boxes[:, 0],
        width=boxes[:, 1],
        valid=valid,
    )


def _obstacle_trace(obstacles, n_ticks: int) -> ObjectTrace:
    n = len(obstacles)
    return ObjectTrace(
        ids=tuple(o.id for o in obstacles),
        xy=np.repeat(np.array([[o.pose.x, o.pose.y] for o in obstacles]).reshape(n, 1, 2), n_ticks, axis=1),
        heading=np.repeat(np.array([o.pose.heading for o in obstacles]).reshape(n, 1), n_ticks, axis=1),
        velocity=np.zeros((n, n_ticks, 2)),
        length=np.array([o.box[0] for o in obstacles], dtype=np.float64),
        width=np.array([o.box[1] for o in obstacles], dtype=np.float64),
        valid=np.ones((n, n_ticks), dtype=bool),
    )


## Agent policies


class AgentDriver(ABC):
    """Moves the non-AV agents one tick at a time; row ``i`` is ``scenario.agents[i]``."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.tick = 0

    @abstractmethod
    def states(self) -> npt.NDArray[np.float64]:
        """``(N, 5)`` rows of ``x, y, heading, vx, vy`` at the current tick."""

    @abstractmethod
    def valid(self) -> npt.NDArray[np.bool_]:
        pass

    @abstractmethod
    def advance(self, av: Body, dt: float) -> None:
        pass

    def future(self, agent_index: int, horizon: int = FUTURE_STEPS) -> list[Point] | None:
        """Logged future positions from the current tick, when the policy has them."""
        return None


def _replay_arrays(track: AgentTrack, n_frames: int, dt: float) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.bool_]]:
    """Logged rows for ticks ``0 .. n_frames - 1``; ticks past the log are unobserved."""
    rows = np.zeros((n_frames, 5))
    valid = np.zeros(n_frames, dtype=bool)
    current = track.current
    if track.replay:
        for t, state in enumerate(track.replay[:n_frames]):
            rows[t] = (state.pose.x, state.pose.y, state.pose.heading, *state.velocity)
            valid[t] = state.valid
    elif track.future_gt is not None and current.valid:
        points = np.vstack([current.pose.xy, np.asarray(track.future_gt)])[:n_frames]
        vel = np.empty_like(points)
        vel[0] = current.velocity
        vel[1:] = np.diff(points, axis=0) / dt
        moving = np.linalg.norm(vel, axis=1) > _STATIC_SPEED
        heading = np.where(moving, np.arctan2(vel[:, 1], vel[:, 0]), current.pose.heading)
        rows[: len(points)] = np.column_stack([points, heading, vel])
        valid[: len(points)] = True
    elif current.valid:
        # Nothing logged ahead: the agent holds its current pose.
        rows[:] = (current.pose.x, current.pose.y, current.pose.heading, 0.0, 0.0)
        valid[:] = True
    return rows, valid


class ReplayDriver(AgentDriver):
    def __init__(self, scenario: Scenario, n_ticks: int):
        super().__init__(scenario)
        logs = [_replay_arrays(agent, n_ticks + 1 + FUTURE_STEPS, scenario.dt) for agent in scenario.agents]
        self._rows = np.array([rows for rows, _ in logs]).reshape(len(logs), -1, 5)
        self._valid = np.array([valid for _, valid in logs], dtype=bool).reshape(len(logs), -1)

    def log(self, agent_index: int) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.bool_]]:
        return self._rows[agent_index], self._valid[agent_index]

    def states(self) -> npt.NDArray[np.float64]:
        return self._rows[:, self.tick]

    def valid(self) -> npt.NDArray[np.bool_]:
        return self._valid[:, self.tick]

    def advance(self, av: Body, dt: float) -> None:
        self.tick += 1

    def future(self, agent_index: int, horizon: int = FUTURE_STEPS) -> list[Point] | None:
        window = slice(self.tick + 1, self.tick + 1 + horizon)
        observed = self._valid[agent_index, window]
        count = len(observed) if observed.all() else int(np.argmin(observed))
        if count == 0:
            return None
        return [(float(x), float(y)) for x, y in self._rows[agent_index, window][:count, :2]]


class IdmDriver(AgentDriver):
    """Agents keep their logged path; IDM sets their speed with the AV and each other as leaders.

    Agents unobserved at the current frame keep replaying their log.
    """

    def __init__(self, scenario: Scenario, n_ticks: int, idm: IdmParams, margin: float = 0.3):
        super().__init__(scenario)
        replay = ReplayDriver(scenario, n_ticks)
        self._replay = replay
        self._reactive: dict[int, int] = {}
        vehicles: list[PathVehicle] = []
        for i, agent in enumerate(scenario.agents):
            if not agent.current.valid:
                continue
            rows, valid = replay.log(i)
            path = drop_repeated_points(rows[valid, :2], tol=1e-3)
            top_speed = float(np.max(np.hypot(rows[valid, 3], rows[valid, 4])))
            static = len(path) < 2 or top_speed < _STATIC_SPEED or cumulative_arclength(path)[-1] < 0.5
            if len(path) < 2:
                heading = agent.current.pose.heading
                path = np.vstack([agent.current.pose.xy, agent.current.pose.xy + [np.cos(heading), np.sin(heading)]])
            self._reactive[i] = len(vehicles)
            vehicles.append(
                PathVehicle(
                    id=agent.id,
                    path=path,
                    s=0.0,
                    v=0.0 if static else agent.current.speed,
                    box=agent.box,
                    limits=[(0.0, top_speed)],
                    stops=self._red_stops(path),
                    static=static,
                )
            )
        self.traffic = PathTraffic(vehicles, idm, margin)
        self._obstacles = [Body(o.pose.x, o.pose.y, 0.0, 0.0, o.box[0], o.box[1]) for o in scenario.obstacles]

    def _red_stops(self, path: npt.NDArray[np.float64]) -> list[float]:
        stops = []
        for lane in self.scenario.lanes:
            if lane.traffic_light != TrafficLightState.RED:
                continue
            entry = lane.centerline_array[0]
            proj = project_points(path, entry)
            if proj.distance[0] < 1.0 and proj.s_raw[0] > 0.5:
                stops.append(float(proj.s_raw[0]))
        return sorted(stops)

    def states(self) -> npt.NDArray[np.float64]:
        rows = self._replay.states().copy()
        for i, k in self._reactive.items():
            vehicle = self.traffic.vehicles[k]
            x, y, heading = vehicle.pose()
            rows[i] = (x, y, heading, vehicle.v * np.cos(heading), vehicle.v * np.sin(heading))
        return rows

    def valid(self) -> npt.NDArray[np.bool_]:
        valid = self._replay.valid().copy()
        valid[list(self._reactive)] = True
        return valid

    def advance(self, av: Body, dt: float) -> None:
        self.traffic.step(dt, [av, *self._obstacles])
        self._replay.advance(av, dt)
        self.tick += 1


## Episode loop


def _agent_state(row: npt.NDArray[np.float64], valid: bool, box: tuple[float, float]) -> AgentState:
    if not valid:
        return AgentState.model_construct(pose=Pose2D.model_construct(x=0.0, y=0.0, heading=0.0), velocity=(0.0, 0.0), box=box, valid=False)
    x, y, heading, vx, vy = (float(v) for v in row)
    return AgentState.model_construct(
        pose=Pose2D.model_construct(x=x, y=y, heading=float(normalize_angle(heading))), velocity=(vx, vy), box=box, valid=True
    )


class _Observer:
    """Rolling 2 s histories and the per-tick observation built from them."""

    def __init__(self, scenario: Scenario, driver: AgentDriver):
        self.scenario = scenario
        self.driver = driver
        self.av_history = deque(scenario.av.history, maxlen=HISTORY_STEPS)
        self.agent_histories = [deque(agent.history, maxlen=HISTORY_STEPS) for agent in scenario.agents]
        self.accel = scenario.av.acceleration
        self.steering = scenario.av.steering

    def record(self, av_state: npt.NDArray[np.float64], accel: float, steering: float) -> None:
        x, y, heading, speed = (float(v) for v in av_state)
        box = self.scenario.av.box
        self.av_history.append(_agent_state(np.array([x, y, heading, speed * np.cos(heading), speed * np.sin(heading)]), True, box))
        rows, valid = self.driver.states(), self.driver.valid()
        for i, agent in enumerate(self.scenario.agents):
            self.agent_histories[i].append(_agent_state(rows[i], bool(valid[i]), agent.box))
        self.accel, self.steering = accel, steering

    def observe(self) -> Scenario:
        av = self.scenario.av
        ego = EgoTrack.model_construct(
            id=av.id,
            kind=av.kind,
            history=list(self.av_history),
            future_gt=None,
            replay=None,
            acceleration=self.accel,
            steering=self.steering,
        )
        agents = [
            AgentTrack.model_construct(
                id=agent.id,
                kind=agent.kind,
                history=list(history),
                future_gt=self.driver.future(i) if history[-1].valid else None,
                replay=None,
            )
            for i, (agent, history) in enumerate(zip(self.scenario.agents, self.agent_histories))
        ]
        return Scenario.model_construct(
            metadata=self.scenario.metadata,
            dt=self.scenario.dt,
            av=ego,
            agents=agents,
            obstacles=self.scenario.obstacles,
            lanes=self.scenario.lanes,
            route_lane_ids=self.scenario.route_lane_ids,
        )


def _xy_list(points: npt.NDArray[np.float64]) -> list[Point]:
    return [(float(x), float(y)) for x, y in points]


def _at_fault_contact(
    ego_window: npt.NDArray[np.float64],
    objects: ObjectTrace,
    box: tuple[float, float],
    map_ctx: MapContext,
    metrics: MetricsConfig,
) -> CollisionRecord | None:
    """At-fault contact starting at the second tick of a two-tick window."""
    ego = EgoTrace(ego_window[:, :2], ego_window[:, 2], ego_window[:, 3], *box)
    records = find_collisions(ego, objects, map_ctx, metrics, first_only=True)[0]
    return next((r for r in records if r.tick == 1 and r.at_fault), None)


def run_episode(
    scenario: Scenario,
    planner: Planner,
    policy: AgentPolicy | str | None = None,
    seed: int = 0,
    config: SimulatorConfig | None = None,
    idm: IdmParams | None = None,
    vehicle: VehicleParams | None = None,
    tracker: TrackerParams | None = None,
    metrics: MetricsConfig | None = None,
) -> SimLog:
    """Run one closed-loop episode.

    A planner exception ends the episode early and marks the log failed; it is
    never raised to the caller. ``seed`` is recorded for provenance, the
    episode itself has no random component.
    """
    config = config or SimulatorConfig()
    policy = AgentPolicy(policy or config.policy)
    idm = idm or IdmParams()
    vehicle = vehicle or VehicleParams()
    tracker = tracker or TrackerParams()
    metrics = metrics or MetricsConfig()
    dt = scenario.dt
    n_ticks = config.n_ticks

    if policy == AgentPolicy.REACTIVE:
        driver: AgentDriver = IdmDriver(scenario, n_ticks, idm, config.reactive_margin)
    else:
        driver = ReplayDriver(scenario, n_ticks)
    observer = _Observer(scenario, driver)
    map_ctx = MapContext.from_scenario(scenario, metrics)
    obstacles = _obstacle_trace(scenario.obstacles, 2)
    agent_ids = tuple(a.id for a in scenario.agents)
    agent_boxes = [a.box for a in scenario.agents]

    av = scenario.av_state
    state = np.array([av.pose.x, av.pose.y, av.pose.heading, av.speed])
    av_frames: list[AvFrame] = []
    agent_rows = [driver.states()]
    agent_valid = [driver.valid()]
    events: list[SimEvent] = []
    cycles: list[CycleRecord] = []
    failure: str | None = None

    try:
        planner.initialize(scenario)
    except Exception as e:
        failure = str(EpisodeError(0, f"{type(e).__name__}: {e}"))
        logger.error(failure)
        events.append(SimEvent(tick=0, kind="planner_failure", detail=failure))

    for tick in range(n_ticks if failure is None else 0):
        observation = observer.observe()
        try:
            result = planner.plan(observation, tick)
        except Exception as e:
            failure = str(EpisodeError(tick, f"{type(e).__name__}: {e}"))
            logger.error(failure)
            events.append(SimEvent(tick=tick, kind="planner_failure", detail=failure))
            break

        reference = TrackingReference.from_trajectories(result.trajectory, dt, tracker.stop_speed)
        accel, steering = track(reference, state[None], 0, vehicle, tracker)
        accel, steering = float(accel[0]), float(steering[0])
        av_frames.append(AvFrame(tick=tick, x=state[0], y=state[1], heading=state[2], speed=state[3], accel=accel, steering=steering))

        if result.emergency_stop:
            events.append(SimEvent(tick=tick, kind="emergency_stop"))
        snapshot = config.snapshot_every > 0 and tick % config.snapshot_every == 0
        if config.record_diagnostics or snapshot:
            proposals = result.proposals
            cycles.append(
                CycleRecord(
                    tick=tick,
                    selected=_xy_list(result.trajectory[:, X : Y + 1]),
                    diagnostics=result.diagnostics if config.record_diagnostics else None,
                    proposals=[_xy_list(p[:, X : Y + 1]) for p in proposals.flat] if snapshot and proposals is not None else None,
                    reference_lines=(
                        [_xy_list(line.points) for line in proposals.reference_lines] if snapshot and proposals is not None else None
                    ),
                )
            )

        av_body = Body(state[0], state[1], state[3] * np.cos(state[2]), state[3] * np.sin(state[2]), *scenario.av.box)
        driver.advance(av_body, dt)
        next_state = step_states(state, accel, steering, dt, vehicle.wheelbase)
        agent_rows.append(driver.states())
        agent_valid.append(driver.valid())
        observer.record(next_state, accel, steering)

        if config.terminate_on_collision:
            rows = np.stack(agent_rows[-2:], axis=1).reshape(len(agent_ids), 2, 5)
            valid = np.stack(agent_valid[-2:], axis=1).reshape(len(agent_ids), 2)
            objects = _agent_trace(agent_ids, agent_boxes, rows, valid).concat(obstacles)
            contact = _at_fault_contact(np.stack([state, next_state]), objects, scenario.av.box, map_ctx, metrics)
            if contact is not None:
                state = next_state
                logger.info(f"{scenario.metadata.id}: at-fault collision with {contact.object_id} at tick {tick + 1}, stopping")
                break
        state = next_state

    av_frames.append(AvFrame(tick=len(av_frames), x=state[0], y=state[1], heading=state[2], speed=state[3]))
    rows = np.stack(agent_rows, axis=1).reshape(len(agent_ids), len(agent_rows), 5)
    valid = np.stack(agent_valid, axis=1).reshape(len(agent_ids), len(agent_rows))
    agents = [
        AgentFrames(
            id=agent.id,
            kind=agent.kind,
            box=agent.box,
            x=rows[i, :, 0].tolist(),
            y=rows[i, :, 1].tolist(),
            heading=normalize_angle(rows[i, :, 2]).tolist(),
            vx=rows[i, :, 3].tolist(),
            vy=rows[i, :, 4].tolist(),
            valid=valid[i].tolist(),
        )
        for i, agent in enumerate(scenario.agents)
    ]
    log = SimLog(
        scenario=ScenarioDocument.from_scenario(scenario),
        planner=planner.name,
        policy=policy,
        seed=seed,
        dt=dt,
        av=av_frames,
        agents=agents,
        cycles=cycles,
        failed=failure is not None,
        failure=failure,
    )
    events.extend(_map_events(log, map_ctx, metrics))
    return log.model_copy(update={"events": sorted(events, key=lambda e: (e.tick, e.kind, e.object_id or ""))})


def _map_events(log: SimLog, map_ctx: MapContext, metrics: MetricsConfig) -> list[SimEvent]:
    """Collision and off-road events reconstructed from the finished log."""
    ego = log.ego_trace()
    events = [
        SimEvent(tick=r.tick, kind="collision", object_id=r.object_id, at_fault=r.at_fault, detail=r.reason)
        for r in find_collisions(ego, log.object_trace(), map_ctx, metrics)[0]
    ]
    corners = ego.corners()
    inside = shapely.contains_xy(map_ctx.drivable_tolerant, corners[..., 0], corners[..., 1]).all(axis=-1)
    entered = ~inside & np.concatenate([[True], inside[:-1]])
    events += [SimEvent(tick=int(t), kind="off_road") for t in np.flatnonzero(entered)]
    return events


def expert_positions(scenario: Scenario, n_frames: int) -> npt.NDArray[np.float64]:
    """Logged AV positions for ticks ``0 .. n_frames - 1``, holding the last one past the log."""
    av = scenario.av
    if av.replay:
        points = np.array([s.pose.xy for s in av.replay])
    elif av.future_gt is not None:
        points = np.vstack([av.current.pose.xy, np.asarray(av.future_gt)])
    else:
        points = av.current.pose.xy[None]
    idx = np.minimum(np.arange(n_frames), len(points) - 1)
    return points[idx]


def evaluate_log(
    log: SimLog, scenario: Scenario | None = None, config: MetricsConfig | None = None
) -> tuple[MetricReport, list[CollisionRecord]]:
    """Episode metrics with the AV's logged trajectory as the expert."""
    config = config or MetricsConfig()
    scenario = scenario or log.scenario.to_scenario()
    ego = log.ego_trace()
    map_ctx = MapContext.from_scenario(scenario, config)
    return evaluate_episode(ego, log.object_trace(), expert_positions(scenario, len(log.av)), map_ctx, config)


def save_simlog(log: SimLog) -> bytes:
    return log.model_dump_json(indent=2).encode("utf-8")


def load_simlog(data: bytes | str) -> SimLog:
    """Parse a saved log; schema violations name the offending field."""
    try:
        return SimLog.model_validate_json(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ScenarioParseError(".".join(str(part) for part in first["loc"]) or "<log>", first["msg"]) from e
