"""Scenario augmentors for contrastive imitation learning, and triplet sampling.

Positive augmentors keep the logged AV future a valid answer; negative
augmentors change the scene so that it no longer is. Every augmentor draws
its own sub-seed from the caller's generator and records it, so a sample can
be regenerated from its provenance alone.
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
import sys

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clplan.lane_graph import ReferenceLine, find_reference_lines
from clplan.scene import future_poses
from clplan.types import (
    AgentState,
    AgentTrack,
    AugmentorInapplicable,
    InputError,
    Polarity,
    Pose2D,
    Scenario,
    TrafficLightState,
    TripletSamplingError,
)
from clplan.utils.geometry import (
    box_corners,
    boxes_overlap,
    cumulative_arclength,
    drop_repeated_points,
    from_frame,
    interpolate_polyline,
    normalize_angle,
    project_points,
    rotate,
)

logger = logging.getLogger(__name__)

_SEED_BOUND = 2**31
_DEFAULT_DONOR_BOX = (4.6, 2.0)


class PerturbationMagnitudes(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    longitudinal: float = Field(0.5, ge=0, description="AV-frame x noise bound (m) [decision]")
    lateral: float = Field(0.3, ge=0, description="AV-frame y noise bound (m) [decision]")
    speed: float = Field(0.5, ge=0, description="Speed noise bound (m/s) [decision]")
    acceleration: float = Field(0.5, ge=0, description="Acceleration noise bound (m/s^2) [decision]")
    steering: float = Field(0.05, ge=0, description="Steering noise bound (rad) [decision]")


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    perturbation: PerturbationMagnitudes = PerturbationMagnitudes()
    p_drop: float = Field(0.5, ge=0, le=1, description="Drop probability for non-interactive agents [decision]")
    corridor_length: float = Field(50.0, gt=0, description="Front corridor length along the reference line (m) [decision]")
    corridor_half_width: float = Field(2.5, gt=0, description="Front corridor half width (m) [decision]")
    insertion_min: float = Field(5.0, ge=0, description="Closest insertion distance along the AV future (m) [decision]")
    insertion_max: float = Field(30.0, gt=0, description="Farthest insertion distance along the AV future (m) [decision]")
    signal_lookahead: float = Field(80.0, gt=0, description="Signals farther ahead than this do not count as approaching (m) [decision]")


class AugmentedSample(BaseModel):
    """An augmented scenario with its contrastive label and provenance."""

    model_config = ConfigDict(frozen=True)

    scenario: Scenario
    polarity: Polarity
    gt_valid: bool
    augmentor: str
    seed: int | None = None

    @model_validator(mode="after")
    def check_polarity(self) -> Self:
        if self.gt_valid != (self.polarity == Polarity.POSITIVE):
            raise ValueError(f"{self.polarity.value} samples must have gt_valid={self.polarity == Polarity.POSITIVE}")
        return self


def _child_rng(rng: np.random.Generator) -> tuple[int, np.random.Generator]:
    seed = int(rng.integers(0, _SEED_BOUND))
    return seed, np.random.default_rng(seed)


def _positive(scenario: Scenario, name: str, seed: int | None) -> AugmentedSample:
    return AugmentedSample(scenario=scenario, polarity=Polarity.POSITIVE, gt_valid=True, augmentor=name, seed=seed)


def _negative(scenario: Scenario, name: str, seed: int | None) -> AugmentedSample:
    return AugmentedSample(scenario=scenario, polarity=Polarity.NEGATIVE, gt_valid=False, augmentor=name, seed=seed)


## Interactivity


def _swept_corners(poses: np.ndarray, box: tuple[float, float]) -> np.ndarray:
    return box_corners(poses[:, 0], poses[:, 1], poses[:, 2], box[0], box[1])


def detect_interactive_agents(scenario: Scenario) -> set[str]:
    """Agents whose box at any future step overlaps the AV box at any future step."""
    av_poses = future_poses(scenario.av)
    if av_poses is None:
        raise InputError("interactivity needs the AV's future")
    av_corners = _swept_corners(av_poses, scenario.av.box)
    interactive: set[str] = set()
    for agent in scenario.agents:
        poses = future_poses(agent)
        if poses is None:
            logger.warning(f"Agent {agent.id} has no observed future, treating it as non-interactive")
            continue
        agent_corners = _swept_corners(poses, agent.box)
        if boxes_overlap(agent_corners[:, None], av_corners[None]).any():
            interactive.add(agent.id)
    return interactive


## Positive augmentors


def state_perturbation(
    scenario: Scenario, rng: np.random.Generator, magnitudes: PerturbationMagnitudes | None = None
) -> AugmentedSample:
    """Uniform noise on the AV's current position, speed, acceleration and steering."""
    magnitudes = magnitudes or PerturbationMagnitudes()
    seed, child = _child_rng(rng)
    bounds = np.array(
        [magnitudes.longitudinal, magnitudes.lateral, magnitudes.speed, magnitudes.acceleration, magnitudes.steering]
    )
    if not np.all(np.isfinite(bounds)):
        raise InputError("perturbation magnitudes must be finite")
    d_lon, d_lat, d_speed, d_accel, d_steer = child.uniform(-bounds, bounds)

    av = scenario.av
    current = av.current
    pose = current.pose
    offset = rotate(np.array([d_lon, d_lat]), pose.heading)
    velocity = np.asarray(current.velocity, dtype=np.float64)
    speed = current.speed
    new_speed = max(0.0, speed + d_speed)
    if speed > 0.0:
        velocity = velocity * (new_speed / speed)
    else:
        velocity = new_speed * np.array([np.cos(pose.heading), np.sin(pose.heading)])
    perturbed = AgentState(
        pose=Pose2D(x=pose.x + offset[0], y=pose.y + offset[1], heading=pose.heading),
        velocity=(float(velocity[0]), float(velocity[1])),
        box=current.box,
        valid=True,
    )
    new_av = av.model_copy(
        update={
            "history": [*av.history[:-1], perturbed],
            "acceleration": av.acceleration + float(d_accel),
            "steering": av.steering + float(d_steer),
        }
    )
    return _positive(scenario.replace(av=new_av), "state_perturbation", seed)


def noninteractive_dropout(scenario: Scenario, rng: np.random.Generator, p_drop: float = 0.5) -> AugmentedSample:
    """Drop each non-interactive agent independently with probability ``p_drop``."""
    seed, child = _child_rng(rng)
    interactive = detect_interactive_agents(scenario)
    draws = child.random(len(scenario.agents))
    kept = [a for a, u in zip(scenario.agents, draws) if a.id in interactive or u >= p_drop]
    return _positive(scenario.replace(agents=kept), "noninteractive_dropout", seed)


## Negative augmentors


def nearest_reference_line(scenario: Scenario) -> tuple[ReferenceLine, float] | None:
    """The reference line closest to the AV, with the AV's arclength on it."""
    lines = find_reference_lines(scenario)
    if not lines:
        return None
    xy = scenario.av_state.pose.xy
    projections = [project_points(line.points, xy) for line in lines]
    best = int(np.argmin([float(p.distance[0]) for p in projections]))
    return lines[best], float(projections[best].s[0])


def _leading_agents(scenario: Scenario, line: ReferenceLine, s_av: float, config: AugmentConfig) -> list[str]:
    observed = [a for a in scenario.agents if a.current.valid]
    if not observed:
        return []
    positions = np.array([a.current.pose.xy for a in observed])
    proj = project_points(line.points, positions)
    ahead = proj.s_raw - s_av
    inside = (ahead > 0.0) & (ahead <= config.corridor_length) & (np.abs(proj.d) <= config.corridor_half_width)
    return [a.id for a, flag in zip(observed, inside) if flag]


def leading_dropout(scenario: Scenario, config: AugmentConfig | None = None) -> AugmentedSample:
    """Remove every agent in the AV's front corridor."""
    config = config or AugmentConfig()
    nearest = nearest_reference_line(scenario)
    if nearest is None:
        raise AugmentorInapplicable("leading_dropout", "no reference line")
    leaders = set(_leading_agents(scenario, *nearest, config))
    if not leaders:
        raise AugmentorInapplicable("leading_dropout", "no agent ahead of the AV")
    kept = [a for a in scenario.agents if a.id not in leaders]
    return _negative(scenario.replace(agents=kept), "leading_dropout", None)


def _transform_state(state: AgentState, origin: np.ndarray, target: np.ndarray, rotation: float) -> AgentState:
    if not state.valid:
        return state
    xy = from_frame(state.pose.xy - origin, target, rotation)
    velocity = rotate(np.asarray(state.velocity), rotation)
    return AgentState(
        pose=Pose2D(x=xy[0], y=xy[1], heading=normalize_angle(state.pose.heading + rotation)),
        velocity=(float(velocity[0]), float(velocity[1])),
        box=state.box,
        valid=True,
    )


def _unique_id(scenario: Scenario, base: str) -> str:
    taken = {a.id for a in scenario.agents} | {scenario.av.id}
    candidate, k = base, 1
    while candidate in taken:
        k += 1
        candidate = f"{base}_{k}"
    return candidate


def _stationary_track(agent_id: str, donor: AgentTrack | None, pose: Pose2D, scenario: Scenario) -> AgentTrack:
    box = donor.box if donor is not None else _DEFAULT_DONOR_BOX
    frame = AgentState(pose=pose, velocity=(0.0, 0.0), box=box, valid=True)
    replay_len = len(scenario.av.replay) if scenario.av.replay else None
    return AgentTrack(
        id=agent_id,
        kind=donor.kind if donor is not None else "vehicle",
        history=[frame] * len(scenario.av.history),
        future_gt=[(pose.x, pose.y)] * len(scenario.av.future_gt or []) or None,
        replay=[frame] * replay_len if replay_len else None,
    )


def _collides_with_av(scenario: Scenario, track: AgentTrack) -> bool:
    av_poses = future_poses(scenario.av)
    poses = future_poses(track)
    if av_poses is None or poses is None:
        return False
    n = min(len(av_poses), len(poses))
    return bool(boxes_overlap(_swept_corners(av_poses[:n], scenario.av.box), _swept_corners(poses[:n], track.box)).any())


def leading_insertion(
    scenario: Scenario, donor: AgentTrack | None, rng: np.random.Generator, config: AugmentConfig | None = None
) -> AugmentedSample:
    """Place a copy of ``donor`` on the AV's logged path so that the logged future collides with it."""
    config = config or AugmentConfig()
    seed, child = _child_rng(rng)
    av_poses = future_poses(scenario.av)
    if av_poses is None:
        raise AugmentorInapplicable("leading_insertion", "AV has no future")
    path = drop_repeated_points(av_poses[:, :2])
    arclength = cumulative_arclength(path)
    total = float(arclength[-1]) if len(arclength) else 0.0
    if len(path) < 2 or total < config.insertion_min:
        raise AugmentorInapplicable("leading_insertion", f"AV future spans {total:.2f} m < {config.insertion_min} m")
    distance = float(child.uniform(config.insertion_min, min(config.insertion_max, total)))
    point, heading = interpolate_polyline(path, arclength, distance, extrapolate=False)
    target = Pose2D(x=float(point[0, 0]), y=float(point[0, 1]), heading=float(heading[0]))

    agent_id = _unique_id(scenario, f"{donor.id}_inserted" if donor is not None else "inserted")
    inserted: AgentTrack | None = None
    if donor is not None and donor.current.valid:
        origin = donor.current.pose
        rotation = normalize_angle(target.heading - origin.heading)

        def move(state: AgentState) -> AgentState:
            return _transform_state(state, origin.xy, target.xy, rotation)

        future = None
        if donor.future_gt is not None:
            pts = from_frame(np.asarray(donor.future_gt) - origin.xy, target.xy, rotation)
            future = [(float(x), float(y)) for x, y in pts]
        inserted = AgentTrack(
            id=agent_id,
            kind=donor.kind,
            history=[move(s) for s in donor.history],
            future_gt=future,
            replay=[move(s) for s in donor.replay] if donor.replay is not None else None,
        )
        if not _collides_with_av(scenario, inserted):
            inserted = None
    if inserted is None:
        inserted = _stationary_track(agent_id, donor, target, scenario)
    return _negative(scenario.replace(agents=[*scenario.agents, inserted]), "leading_insertion", seed)


def interactive_dropout(scenario: Scenario, rng: np.random.Generator) -> AugmentedSample:
    """Remove a random nonempty subset of the interactive agents."""
    seed, child = _child_rng(rng)
    interactive = sorted(detect_interactive_agents(scenario))
    if not interactive:
        raise AugmentorInapplicable("interactive_dropout", "no interactive agents")
    count = int(child.integers(1, len(interactive) + 1))
    removed = set(child.choice(interactive, size=count, replace=False).tolist())
    kept = [a for a in scenario.agents if a.id not in removed]
    return _negative(scenario.replace(agents=kept), "interactive_dropout", seed)


_INVERTED = {TrafficLightState.RED: TrafficLightState.GREEN, TrafficLightState.GREEN: TrafficLightState.RED}


def traffic_light_inversion(scenario: Scenario, config: AugmentConfig | None = None) -> AugmentedSample:
    """Swap red and green on the AV's route lanes when it approaches a signal with no leader."""
    config = config or AugmentConfig()
    nearest = nearest_reference_line(scenario)
    if nearest is None:
        raise AugmentorInapplicable("traffic_light_inversion", "no reference line")
    line, s_av = nearest
    lanes = scenario.lanes_by_id
    targets = set(scenario.route_lane_ids or line.source_lane_ids)
    approaching = [
        lane_id
        for lane_id, offset in zip(line.source_lane_ids, line.lane_offsets)
        if lane_id in targets
        and lanes[lane_id].traffic_light in _INVERTED
        and offset - s_av <= config.signal_lookahead
    ]
    if not approaching:
        raise AugmentorInapplicable("traffic_light_inversion", "no signal ahead on the route")
    if _leading_agents(scenario, line, s_av, config):
        raise AugmentorInapplicable("traffic_light_inversion", "a vehicle leads the AV")
    new_lanes = [
        lane.model_copy(update={"traffic_light": _INVERTED[lane.traffic_light]})
        if lane.id in targets and lane.traffic_light in _INVERTED
        else lane
        for lane in scenario.lanes
    ]
    return _negative(scenario.replace(lanes=new_lanes), "traffic_light_inversion", None)


## Registry and triplets


@dataclass(frozen=True)
class Augmentor:
    name: str
    polarity: Polarity
    apply: Callable[[Scenario, np.random.Generator, AugmentConfig, Sequence[AgentTrack]], AugmentedSample]


def _pick_donor(scenario: Scenario, rng: np.random.Generator, donors: Sequence[AgentTrack]) -> AgentTrack | None:
    pool = [d for d in donors if d.current.valid] or [a for a in scenario.agents if a.current.valid]
    if not pool:
        return None
    return pool[int(rng.integers(0, len(pool)))]


AUGMENTORS: dict[str, Augmentor] = {
    a.name: a
    for a in (
        Augmentor(
            "state_perturbation",
            Polarity.POSITIVE,
            lambda s, rng, cfg, donors: state_perturbation(s, rng, cfg.perturbation),
        ),
        Augmentor(
            "noninteractive_dropout",
            Polarity.POSITIVE,
            lambda s, rng, cfg, donors: noninteractive_dropout(s, rng, cfg.p_drop),
        ),
        Augmentor("leading_dropout", Polarity.NEGATIVE, lambda s, rng, cfg, donors: leading_dropout(s, cfg)),
        Augmentor(
            "leading_insertion",
            Polarity.NEGATIVE,
            lambda s, rng, cfg, donors: leading_insertion(s, _pick_donor(s, rng, donors), rng, cfg),
        ),
        Augmentor("interactive_dropout", Polarity.NEGATIVE, lambda s, rng, cfg, donors: interactive_dropout(s, rng)),
        Augmentor(
            "traffic_light_inversion", Polarity.NEGATIVE, lambda s, rng, cfg, donors: traffic_light_inversion(s, cfg)
        ),
    )
}


def apply_augmentor(
    name: str,
    scenario: Scenario,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
    donors: Sequence[AgentTrack] = (),
) -> AugmentedSample:
    if name not in AUGMENTORS:
        raise InputError(f"unknown augmentor {name!r}; choose from {sorted(AUGMENTORS)}")
    return AUGMENTORS[name].apply(scenario, rng, config or AugmentConfig(), donors)


def _first_applicable(
    polarity: Polarity,
    scenario: Scenario,
    rng: np.random.Generator,
    config: AugmentConfig,
    donors: Sequence[AgentTrack],
) -> AugmentedSample | None:
    names = [a.name for a in AUGMENTORS.values() if a.polarity == polarity]
    for index in rng.permutation(len(names)):
        try:
            return apply_augmentor(names[index], scenario, rng, config, donors)
        except AugmentorInapplicable as e:
            logger.debug(f"Skipping {e.augmentor}: {e.reason}")
    return None


@dataclass(frozen=True)
class Triplet:
    original: Scenario
    positive: AugmentedSample
    negative: AugmentedSample


def sample_triplet(
    scenario: Scenario,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
    donors: Sequence[AgentTrack] = (),
) -> Triplet:
    """One positive and one negative sample, each from a uniformly drawn applicable augmentor."""
    config = config or AugmentConfig()
    positive = _first_applicable(Polarity.POSITIVE, scenario, rng, config, donors)
    negative = _first_applicable(Polarity.NEGATIVE, scenario, rng, config, donors)
    if positive is None:
        raise TripletSamplingError(f"no positive augmentor applies to {scenario.metadata.id}")
    if negative is None:
        logger.warning(f"No negative augmentor applies to {scenario.metadata.id}")
        raise TripletSamplingError(f"no negative augmentor applies to {scenario.metadata.id}")
    return Triplet(original=scenario, positive=positive, negative=negative)
