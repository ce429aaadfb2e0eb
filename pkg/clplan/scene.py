"""Scenario feature extraction and the versioned JSON wire format."""

import logging
from typing import Literal, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from clplan.types import (
    FUTURE_STEPS,
    AgentState,
    AgentTrack,
    EgoTrack,
    InputError,
    Lane,
    Point,
    Pose2D,
    Scenario,
    ScenarioMetadata,
    ScenarioParseError,
    ScenarioValidationError,
    StaticObstacle,
    TrafficLightState,
)
from clplan.utils.geometry import normalize_angle, resample_polyline, rotate

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def vectorize_agent_history(
    track: AgentTrack | Sequence[AgentState], frame: Pose2D | None = None
) -> npt.NDArray[np.float64]:
    """Difference features of an agent history.

    Row ``t`` describes the step from frame ``t`` to ``t + 1``:
    ``(dx, dy, dheading, dvx, dvy, length, width, valid)``. A step touching an
    unobserved frame has zero difference channels and ``valid = 0``.

    Args:
        track: The track, or its raw history frames.
        frame: Optional reference pose (usually the AV's); positions, headings
            and velocities are expressed in it.

    Returns:
        A ``(len(history) - 1, 8)`` feature matrix.

    Raises:
        InputError: If the history has fewer than 2 frames.
    """
    history = list(track.history if isinstance(track, AgentTrack) else track)
    if len(history) < 2:
        raise InputError(f"agent history needs at least 2 frames, got {len(history)}")

    pos = np.array([[s.pose.x, s.pose.y] for s in history], dtype=np.float64)
    heading = np.array([s.pose.heading for s in history], dtype=np.float64)
    vel = np.array([s.velocity for s in history], dtype=np.float64)
    box = np.array([s.box for s in history], dtype=np.float64)
    valid = np.array([s.valid for s in history], dtype=bool)

    if frame is not None:
        pos = rotate(pos - frame.xy, -frame.heading)
        vel = rotate(vel, -frame.heading)
        heading = normalize_angle(heading - frame.heading)

    step_valid = valid[1:] & valid[:-1]
    features = np.zeros((len(history) - 1, 8), dtype=np.float64)
    features[:, 0:2] = np.diff(pos, axis=0)
    features[:, 2] = normalize_angle(np.diff(heading))
    features[:, 3:5] = np.diff(vel, axis=0)
    features[~step_valid, 0:5] = 0.0
    features[:, 5:7] = box[1:]
    features[:, 7] = step_valid.astype(np.float64)
    return features


def vectorize_map_polyline(lane: Lane, n_points: int, frame: Pose2D | None = None) -> npt.NDArray[np.float64]:
    """Eight-channel point features of a lane.

    Row ``i`` is ``(p_i - p_0, p_i - p_{i-1}, p_i - left_i, p_i - right_i)``
    with ``p_{-1} := p_0``. The centerline and both boundaries are resampled
    to ``n_points`` points uniformly in their own arclength.

    Raises:
        InputError: If ``n_points < 2`` or any polyline has zero length.
    """
    if n_points < 2:
        raise InputError(f"n_points must be at least 2, got {n_points}")
    try:
        center, _ = resample_polyline(np.asarray(lane.centerline), n_points)
        left, _ = resample_polyline(np.asarray(lane.left_boundary), n_points)
        right, _ = resample_polyline(np.asarray(lane.right_boundary), n_points)
    except ValueError as e:
        raise InputError(f"lane {lane.id}: {e}") from e

    if frame is not None:
        center, left, right = (rotate(p - frame.xy, -frame.heading) for p in (center, left, right))

    previous = np.vstack([center[:1], center[:-1]])
    return np.hstack([center - center[0], center - previous, center - left, center - right])


def future_poses(track: AgentTrack) -> npt.NDArray[np.float64] | None:
    """``(horizon + 1, 3)`` array of ``(x, y, heading)`` from the current frame onwards.

    Reads the replay log when present, otherwise the ground-truth future with
    headings taken from the direction of travel. ``None`` when the track has
    neither or its current frame is unobserved.
    """
    current = track.current
    if not current.valid:
        return None
    if track.replay is not None and len(track.replay) > FUTURE_STEPS:
        frames = track.replay[: FUTURE_STEPS + 1]
        poses = np.array([[s.pose.x, s.pose.y, s.pose.heading] for s in frames], dtype=np.float64)
        invalid = np.array([not s.valid for s in frames])
        # Unobserved replay frames hold the previous pose.
        for t in np.flatnonzero(invalid):
            poses[t] = poses[t - 1] if t > 0 else poses[t]
        return poses
    if track.future_gt is None:
        return None
    xy = np.vstack([current.pose.xy[None, :], np.asarray(track.future_gt, dtype=np.float64)])
    step = np.diff(xy, axis=0)
    moving = np.linalg.norm(step, axis=1) > 1e-6
    heading = np.full(len(xy), current.pose.heading)
    for t in range(1, len(xy)):
        heading[t] = np.arctan2(step[t - 1, 1], step[t - 1, 0]) if moving[t - 1] else heading[t - 1]
    return np.column_stack([xy, heading])


def agent_pose_at(track: AgentTrack, t: int) -> npt.NDArray[np.float64] | None:
    """``(x, y, heading)`` of a track ``t`` steps after the current frame."""
    if t == 0:
        state = track.current
        return np.array([state.pose.x, state.pose.y, state.pose.heading]) if state.valid else None
    poses = future_poses(track)
    if poses is None:
        return None
    return poses[min(t, len(poses) - 1)]


## Wire format


class LaneRecord(BaseModel):
    """A lane as stored on disk; its signal state lives in ``traffic_lights``."""

    model_config = ConfigDict(extra="forbid")

    id: str
    centerline: list[Point]
    left_boundary: list[Point]
    right_boundary: list[Point]
    successors: list[str] = Field(default_factory=list)
    speed_limit: float


class ScenarioDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: Literal[1]
    dt: float
    metadata: ScenarioMetadata | None = None
    av: EgoTrack
    agents: list[AgentTrack]
    obstacles: list[StaticObstacle]
    lanes: list[LaneRecord]
    route_lane_ids: list[str]
    traffic_lights: dict[str, TrafficLightState]

    def to_scenario(self) -> Scenario:
        lane_ids = {lane.id for lane in self.lanes}
        unknown = sorted(set(self.traffic_lights) - lane_ids)
        if unknown:
            raise ScenarioValidationError("traffic_lights", f"unknown lane ids {unknown}")
        try:
            lanes = [
                Lane(
                    **lane.model_dump(),
                    traffic_light=self.traffic_lights.get(lane.id, TrafficLightState.UNKNOWN),
                )
                for lane in self.lanes
            ]
            return Scenario(
                metadata=self.metadata or ScenarioMetadata(),
                dt=self.dt,
                av=self.av,
                agents=self.agents,
                obstacles=self.obstacles,
                lanes=lanes,
                route_lane_ids=self.route_lane_ids,
            )
        except ValidationError as e:
            raise _parse_error(e, prefix="lanes") from e

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "ScenarioDocument":
        lights = {
            lane.id: lane.traffic_light
            for lane in sorted(scenario.lanes, key=lambda lane: lane.id)
            if lane.traffic_light != TrafficLightState.UNKNOWN
        }
        return cls(
            version=SCHEMA_VERSION,
            dt=scenario.dt,
            metadata=scenario.metadata,
            av=scenario.av,
            agents=scenario.agents,
            obstacles=scenario.obstacles,
            lanes=[LaneRecord(**lane.model_dump(exclude={"traffic_light"})) for lane in scenario.lanes],
            route_lane_ids=scenario.route_lane_ids,
            traffic_lights=lights,
        )


def _parse_error(error: ValidationError, prefix: str | None = None) -> ScenarioParseError:
    first = error.errors()[0]
    loc = ".".join(str(part) for part in first["loc"]) or prefix or "<document>"
    return ScenarioParseError(loc, first["msg"])


def load_scenario(data: bytes | str) -> Scenario:
    """Parse a scenario document.

    Raises:
        ScenarioParseError: On malformed JSON or a schema violation; ``field``
            names the offending key.
        ScenarioValidationError: On a broken cross-reference.
    """
    try:
        document = ScenarioDocument.model_validate_json(data)
    except ValidationError as e:
        raise _parse_error(e) from e
    return document.to_scenario()


def save_scenario(scenario: Scenario) -> bytes:
    return ScenarioDocument.from_scenario(scenario).model_dump_json(indent=2).encode("utf-8")
