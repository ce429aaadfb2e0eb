from enum import Enum, IntEnum
import sys
from typing import Any

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from clplan.utils.geometry import normalize_angle

HISTORY_STEPS = 20
FUTURE_STEPS = 80
DT = 0.1

# Trajectory channel layout: (x, y, cos(heading), sin(heading), vx, vy)
TRAJECTORY_CHANNELS = 6
X, Y, COS, SIN, VX, VY = range(TRAJECTORY_CHANNELS)

Point = tuple[float, float]
Trajectory = npt.NDArray[np.float64]


class TrafficLightState(str, Enum):
    GREEN = "green"
    YELLOW = "yellow"
    RED = "red"
    UNKNOWN = "unknown"


class AgentKind(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


class AgentPolicy(str, Enum):
    NON_REACTIVE = "non_reactive"
    REACTIVE = "reactive"


class ScenarioKind(str, Enum):
    STRAIGHT_CRUISE = "straight_cruise"
    STOPPED_LEAD = "stopped_lead"
    LANE_BLOCKED = "lane_blocked"
    RED_LIGHT = "red_light"
    UNPROTECTED_LEFT = "unprotected_left"
    LANE_CHANGE = "lane_change"


class Pose2D(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    x: float
    y: float
    heading: float = 0.0

    @field_validator("heading")
    @classmethod
    def wrap_heading(cls, value: float) -> float:
        return float(normalize_angle(value))

    @property
    def xy(self) -> npt.NDArray[np.float64]:
        return np.array([self.x, self.y], dtype=np.float64)


class AgentState(BaseModel):
    """One observed frame of an agent. Invalid frames carry zeroed kinematics."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    pose: Pose2D
    velocity: tuple[float, float] = (0.0, 0.0)
    box: tuple[float, float]
    valid: bool = True

    @model_validator(mode="before")
    @classmethod
    def zero_unobserved(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("valid") is False:
            data = {**data, "pose": {"x": 0.0, "y": 0.0, "heading": 0.0}, "velocity": (0.0, 0.0)}
        return data

    @model_validator(mode="after")
    def check_box(self) -> Self:
        if self.box[0] <= 0 or self.box[1] <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.box}")
        return self

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))

    @classmethod
    def unobserved(cls, box: tuple[float, float]) -> "AgentState":
        return cls(pose=Pose2D(x=0.0, y=0.0), box=box, valid=False)


class AgentTrack(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    kind: AgentKind = AgentKind.VEHICLE
    history: list[AgentState]
    future_gt: list[Point] | None = None
    replay: list[AgentState] | None = None

    @model_validator(mode="after")
    def check_lengths(self) -> Self:
        if len(self.history) != HISTORY_STEPS:
            raise ValueError(f"history must hold {HISTORY_STEPS} frames, got {len(self.history)}")
        if self.future_gt is not None and len(self.future_gt) != FUTURE_STEPS:
            raise ValueError(f"future_gt must hold {FUTURE_STEPS} positions, got {len(self.future_gt)}")
        return self

    @property
    def current(self) -> AgentState:
        return self.history[-1]

    @property
    def box(self) -> tuple[float, float]:
        return self.current.box


class EgoTrack(AgentTrack):
    """The AV track, with the actuator state the augmentations perturb."""

    acceleration: float = 0.0
    steering: float = 0.0

    @model_validator(mode="after")
    def check_current_valid(self) -> Self:
        if not self.current.valid:
            raise ValueError("AV history must be valid at the current frame")
        return self


class StaticObstacle(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    pose: Pose2D
    box: tuple[float, float]

    @model_validator(mode="after")
    def check_box(self) -> Self:
        if self.box[0] <= 0 or self.box[1] <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.box}")
        return self


class Lane(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str
    centerline: list[Point]
    left_boundary: list[Point]
    right_boundary: list[Point]
    successors: list[str] = Field(default_factory=list)
    speed_limit: float = Field(gt=0)
    traffic_light: TrafficLightState = TrafficLightState.UNKNOWN

    @model_validator(mode="after")
    def check_polylines(self) -> Self:
        if len(self.centerline) < 2:
            raise ValueError(f"lane {self.id} needs at least 2 centerline points")
        if len(self.left_boundary) != len(self.centerline) or len(self.right_boundary) != len(self.centerline):
            raise ValueError(f"lane {self.id} boundaries must match the centerline point count")
        return self

    @property
    def centerline_array(self) -> npt.NDArray[np.float64]:
        return np.asarray(self.centerline, dtype=np.float64)


class ScenarioMetadata(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    id: str = "scenario"
    kind: str | None = None
    seed: int | None = None


class Scenario(BaseModel):
    """Everything the planner observes plus the logged ground truth."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    metadata: ScenarioMetadata = Field(default_factory=ScenarioMetadata)
    dt: float = DT
    av: EgoTrack
    agents: list[AgentTrack] = Field(default_factory=list)
    obstacles: list[StaticObstacle] = Field(default_factory=list)
    lanes: list[Lane] = Field(default_factory=list)
    route_lane_ids: list[str] = Field(default_factory=list)

    @field_validator("route_lane_ids")
    @classmethod
    def as_sorted_set(cls, value: list[str]) -> list[str]:
        return sorted(set(value))

    @model_validator(mode="after")
    def check_references(self) -> Self:
        lane_ids = {lane.id for lane in self.lanes}
        if len(lane_ids) != len(self.lanes):
            raise ScenarioValidationError("lanes", "duplicate lane id")
        for lane in self.lanes:
            unknown = [s for s in lane.successors if s not in lane_ids]
            if unknown:
                raise ScenarioValidationError(f"lanes.{lane.id}.successors", f"unknown lane ids {unknown}")
        unknown_route = [r for r in self.route_lane_ids if r not in lane_ids]
        if unknown_route:
            raise ScenarioValidationError("route_lane_ids", f"unknown lane ids {unknown_route}")
        agent_ids = [agent.id for agent in self.agents]
        if len(set(agent_ids)) != len(agent_ids) or self.av.id in agent_ids:
            raise ScenarioValidationError("agents", "agent ids must be unique and differ from the AV id")
        return self

    @property
    def lanes_by_id(self) -> dict[str, Lane]:
        return {lane.id: lane for lane in self.lanes}

    @property
    def av_state(self) -> AgentState:
        return self.av.current

    def replace(self, **changes: Any) -> "Scenario":
        """Validated copy with the given top-level fields swapped in."""
        fields = {name: getattr(self, name) for name in type(self).model_fields}
        return Scenario.model_validate({**fields, **changes})


## Error types


class ExitCode(IntEnum):
    OK = 0
    DOMAIN_ERROR = 1
    USAGE_ERROR = 2


class PlanningError(Exception):
    pass


class InputError(PlanningError):
    pass


class ScenarioParseError(PlanningError):
    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"Scenario parse error at '{field}': {message}")


class ScenarioValidationError(PlanningError):
    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"Scenario validation error at '{field}': {message}")


class DegenerateVectorError(PlanningError):
    pass


class AugmentorInapplicable(PlanningError):
    def __init__(self, augmentor: str, reason: str):
        self.augmentor = augmentor
        self.reason = reason
        super().__init__(f"{augmentor} inapplicable: {reason}")


class TripletSamplingError(PlanningError):
    pass


class EpisodeError(PlanningError):
    def __init__(self, tick: int, message: str):
        self.tick = tick
        self.message = message
        super().__init__(f"Episode failed at tick {tick}: {message}")


class ConfigError(Exception):
    """Unknown key or invalid value in layered configuration."""

    def __init__(self, key: str, message: str):
        self.key = key
        self.message = message
        super().__init__(f"Config error at '{key}': {message}")
