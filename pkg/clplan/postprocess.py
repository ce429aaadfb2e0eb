"""Rule-based post-processing: top-K, forward simulation, rollout scoring and score fusion.

The selector never edits a trajectory. It simulates the most confident
proposals through the tracker and bicycle model, scores each rollout with
the driving metrics, and returns the proposal maximizing
``pi_rule + alpha * pi_0``.
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from clplan.control import (
    SH,
    SV,
    BicycleState,
    TrackerParams,
    TrackingReference,
    VehicleParams,
    step_states,
    track,
)
from clplan.metrics import (
    EgoTrace,
    MapContext,
    MetricsConfig,
    ObjectTrace,
    aggregate_score,
    comfort,
    drivable_compliance,
    driving_direction,
    find_collisions,
    route_progress,
    speed_compliance,
    ttc_within_bound,
)
from clplan.proposer import ProposalSet
from clplan.types import COS, DT, SIN, TRAJECTORY_CHANNELS, VX, VY, X, Y, InputError, Scenario, TrafficLightState
from clplan.utils.geometry import polyline_headings

logger = logging.getLogger(__name__)

# Candidate id of the free head, which has no place in the proposal grid.
FREE_HEAD_INDEX = -1


class PostprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = Field(True, description="Run rule-based selection; otherwise take the most confident proposal [decision]")
    top_k: int = Field(20, ge=1, description="Candidates kept for simulation [method]")
    alpha: float = Field(0.3, ge=0, description="Confidence weight in the fused score [method]")
    n_steps: int = Field(80, ge=1, description="Forward simulation ticks [method]")
    feasibility_tolerance: float = Field(1.0, gt=0, description="Largest rollout deviation still counted feasible (m) [decision]")
    emergency_decel: float = Field(4.0, gt=0, description="Fallback stop deceleration (m/s^2) [decision]")
    ttc_horizon: float = Field(1.0, gt=0, description="Time-to-collision window for rollouts (s) [decision]")
    progress_threshold: float = Field(5.0, ge=0, description="Best rollout progress below which progress scores 1 (m) [decision]")
    prediction: Literal["constant_velocity", "log_oracle"] = Field(
        "constant_velocity", description="Agent futures used for scoring [decision]"
    )
    red_light_box_length: float = Field(1.0, gt=0, description="Virtual stop box length at red-light lane entries (m) [decision]")


@dataclass(frozen=True)
class TopK:
    """The ``k`` most confident proposals; ``indices`` maps back to flat proposal ids."""

    trajectories: npt.NDArray[np.float64]
    confidences: npt.NDArray[np.float64]
    indices: npt.NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.indices)


def topk(proposals: ProposalSet, k: int) -> TopK:
    """Keep the ``k`` highest-confidence proposals, ordered by confidence then flat index."""
    if k < 1:
        raise InputError(f"k must be at least 1, got {k}")
    confidences = np.asarray(proposals.confidences, dtype=np.float64)
    order = np.lexsort((np.arange(len(confidences)), -confidences))[:k]
    return TopK(trajectories=proposals.flat[order], confidences=confidences[order], indices=order.astype(np.int64))


@dataclass(frozen=True)
class Rollout:
    """Simulated execution of one proposal; ``states[0]`` is the AV's state at planning time."""

    states: npt.NDArray[np.float64]
    source_index: int
    feasible: bool
    deviation: float


@dataclass(frozen=True)
class RolloutBatch:
    states: npt.NDArray[np.float64]
    source_indices: npt.NDArray[np.int64]
    feasible: npt.NDArray[np.bool_]
    deviation: npt.NDArray[np.float64]

    def __len__(self) -> int:
        return len(self.source_indices)

    def __getitem__(self, i: int) -> Rollout:
        return Rollout(
            states=self.states[i],
            source_index=int(self.source_indices[i]),
            feasible=bool(self.feasible[i]),
            deviation=float(self.deviation[i]),
        )


def simulate_batch(
    y0: BicycleState,
    trajectories: npt.ArrayLike,
    n_steps: int = 80,
    source_indices: npt.ArrayLike | None = None,
    vehicle: VehicleParams | None = None,
    tracker: TrackerParams | None = None,
    dt: float = DT,
    tolerance: float = 1.0,
) -> RolloutBatch:
    """Track ``(K, T, 6)`` trajectories in lock-step from the same initial state."""
    vehicle = vehicle or VehicleParams()
    tracker = tracker or TrackerParams()
    trajs = np.asarray(trajectories, dtype=np.float64)
    if trajs.ndim == 2:
        trajs = trajs[None]
    n = len(trajs)
    indices = np.arange(n) if source_indices is None else np.asarray(source_indices, dtype=np.int64)
    states = np.empty((n, n_steps + 1, 4))
    states[:, 0] = y0.as_array()
    if n == 0:
        return RolloutBatch(states, indices, np.zeros(0, dtype=bool), np.zeros(0))

    reference = TrackingReference.from_trajectories(trajs, dt, tracker.stop_speed)
    for t in range(n_steps):
        accel, steering = track(reference, states[:, t], t, vehicle, tracker)
        states[:, t + 1] = step_states(states[:, t], accel, steering, dt, vehicle.wheelbase)

    compared = min(n_steps, trajs.shape[1])
    deviation = np.linalg.norm(states[:, 1 : compared + 1, :2] - trajs[:, :compared, X : Y + 1], axis=-1).max(axis=1)
    return RolloutBatch(states, indices, deviation <= tolerance, deviation)


def forward_simulate(
    y0: BicycleState,
    traj: npt.ArrayLike,
    n_steps: int = 80,
    vehicle: VehicleParams | None = None,
    tracker: TrackerParams | None = None,
    dt: float = DT,
    tolerance: float = 1.0,
    source_index: int = 0,
) -> Rollout:
    """Alternate tracker and bicycle steps for ``n_steps`` ticks along one trajectory."""
    batch = simulate_batch(y0, np.asarray(traj)[None], n_steps, [source_index], vehicle, tracker, dt, tolerance)
    return batch[0]


def emergency_stop_trajectory(
    state: BicycleState, decel: float = 4.0, horizon: int = 80, dt: float = DT
) -> npt.NDArray[np.float64]:
    """Constant deceleration along the current heading until standstill."""
    t = (np.arange(horizon) + 1) * dt
    t_stop = state.speed / decel
    moving = np.minimum(t, t_stop)
    distance = state.speed * moving - 0.5 * decel * moving**2
    speed = np.maximum(0.0, state.speed - decel * t)
    c, s = np.cos(state.heading), np.sin(state.heading)
    traj = np.empty((horizon, TRAJECTORY_CHANNELS))
    traj[:, X] = state.x + distance * c
    traj[:, Y] = state.y + distance * s
    traj[:, COS] = c
    traj[:, SIN] = s
    traj[:, VX] = speed * c
    traj[:, VY] = speed * s
    return traj


## Rule scoring


def _prediction_objects(scenario: Scenario, predictions: npt.NDArray[np.float64], n_ticks: int, dt: float) -> ObjectTrace:
    ids, xy, heading, velocity, length, width, valid = [], [], [], [], [], [], []
    for agent, future in zip(scenario.agents, predictions):
        current = agent.current
        path = np.vstack([current.pose.xy[None], np.asarray(future)[: n_ticks - 1]])
        if len(path) < n_ticks:
            path = np.vstack([path, np.repeat(path[-1:], n_ticks - len(path), axis=0)])
        vel = np.empty_like(path)
        vel[0] = current.velocity
        vel[1:] = np.diff(path, axis=0) / dt
        moving = np.linalg.norm(vel, axis=1) > 0.1
        head = np.where(moving, np.arctan2(vel[:, 1], vel[:, 0]), current.pose.heading)
        head[0] = current.pose.heading
        ids.append(agent.id)
        xy.append(path)
        heading.append(head)
        velocity.append(vel)
        length.append(agent.box[0])
        width.append(agent.box[1])
        valid.append(np.full(n_ticks, current.valid))
    for obstacle in scenario.obstacles:
        ids.append(obstacle.id)
        xy.append(np.repeat(obstacle.pose.xy[None], n_ticks, axis=0))
        heading.append(np.full(n_ticks, obstacle.pose.heading))
        velocity.append(np.zeros((n_ticks, 2)))
        length.append(obstacle.box[0])
        width.append(obstacle.box[1])
        valid.append(np.ones(n_ticks, dtype=bool))
    if not ids:
        return ObjectTrace.empty(n_ticks)
    return ObjectTrace(
        ids=tuple(ids),
        xy=np.stack(xy),
        heading=np.stack(heading),
        velocity=np.stack(velocity),
        length=np.asarray(length, dtype=np.float64),
        width=np.asarray(width, dtype=np.float64),
        valid=np.stack(valid),
        virtual=np.zeros(len(ids), dtype=bool),
    )


def red_light_boxes(scenario: Scenario, map_ctx: MapContext, n_ticks: int, box_length: float = 1.0) -> ObjectTrace:
    """Stationary virtual boxes across the entry of every red-light lane the AV is not already in."""
    occupied = map_ctx.lane_membership(scenario.av_state.pose.xy[None])[:, 0]
    ids, xy, heading, length, width = [], [], [], [], []
    for lane, av_inside in zip(map_ctx.lanes, occupied):
        if lane.traffic_light != TrafficLightState.RED or av_inside:
            continue
        centerline = lane.centerline_array
        h = float(polyline_headings(centerline[:2])[0])
        direction = np.array([np.cos(h), np.sin(h)])
        ids.append(f"red_light:{lane.id}")
        xy.append(centerline[0] + direction * box_length / 2.0)
        heading.append(h)
        length.append(box_length)
        width.append(float(np.linalg.norm(np.asarray(lane.left_boundary[0]) - np.asarray(lane.right_boundary[0]))))
    if not ids:
        return ObjectTrace.empty(n_ticks)
    n = len(ids)
    return ObjectTrace(
        ids=tuple(ids),
        xy=np.repeat(np.asarray(xy)[:, None], n_ticks, axis=1),
        heading=np.repeat(np.asarray(heading)[:, None], n_ticks, axis=1),
        velocity=np.zeros((n, n_ticks, 2)),
        length=np.asarray(length),
        width=np.asarray(width),
        valid=np.ones((n, n_ticks), dtype=bool),
        virtual=np.ones(n, dtype=bool),
    )


@dataclass(frozen=True)
class RuleEvaluation:
    """Per-rollout rule scores; excluded rollouts score ``-inf``."""

    scores: npt.NDArray[np.float64]
    excluded: npt.NDArray[np.bool_]
    reasons: tuple[str | None, ...]
    components: dict[str, npt.NDArray[np.float64]]


def evaluate_rollouts(
    rollouts: RolloutBatch,
    predictions: npt.NDArray[np.float64],
    scenario: Scenario,
    config: PostprocessConfig | None = None,
    metrics: MetricsConfig | None = None,
    map_ctx: MapContext | None = None,
    dt: float = DT,
) -> RuleEvaluation:
    """Score every rollout with the driving metrics over its own window."""
    config = config or PostprocessConfig()
    metrics = metrics or MetricsConfig()
    map_ctx = map_ctx or MapContext.from_scenario(scenario, metrics)
    n = len(rollouts)
    if n == 0:
        return RuleEvaluation(np.zeros(0), np.zeros(0, dtype=bool), (), {})

    n_ticks = rollouts.states.shape[1]
    length, width = scenario.av.box
    ego = EgoTrace(
        xy=rollouts.states[..., :2],
        heading=rollouts.states[..., SH],
        speed=rollouts.states[..., SV],
        length=length,
        width=width,
        dt=dt,
    )
    objects = _prediction_objects(scenario, predictions, n_ticks, dt).concat(
        red_light_boxes(scenario, map_ctx, n_ticks, config.red_light_box_length)
    )

    collisions = find_collisions(ego, objects, map_ctx, metrics, first_only=True)
    reasons: list[str | None] = []
    for records in collisions:
        first = next((r for r in records if r.at_fault), None)
        reasons.append(None if first is None else f"at_fault_collision:{first.object_id}")
    excluded = np.array([r is not None for r in reasons])

    path = map_ctx.route
    if path is None:
        pose = scenario.av_state.pose
        heading = np.array([np.cos(pose.heading), np.sin(pose.heading)])
        path = np.stack([pose.xy, pose.xy + heading * 1e3])
    gained = route_progress(ego, path)
    admissible = gained[~excluded]
    best = float(admissible.max()) if admissible.size else 0.0
    if best < config.progress_threshold:
        progress = np.ones(n)
    else:
        progress = np.clip(gained / best, 0.0, 1.0)

    components = {
        "no_at_fault_collision": (~excluded).astype(np.float64),
        "ttc_within_bound": ttc_within_bound(ego, objects, metrics, horizon=config.ttc_horizon),
        "drivable_compliance": drivable_compliance(ego, map_ctx),
        "driving_direction": driving_direction(ego, map_ctx, metrics),
        "comfort": comfort(ego, metrics),
        "progress": progress,
        "speed_compliance": speed_compliance(ego, map_ctx, metrics),
    }
    scores = np.where(excluded, -np.inf, aggregate_score(components, metrics))
    return RuleEvaluation(scores=scores, excluded=excluded, reasons=tuple(reasons), components=components)


## Selection


class CandidateDiagnostics(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    pi_rule: float | None
    pi_0: float
    combined: float | None
    feasible: bool | None = None
    excluded_reason: str | None = None


class PlanningDiagnostics(BaseModel):
    """Per-cycle record of how the executed trajectory was chosen; ``None`` scores mean excluded.

    ``selected_index`` is ``FREE_HEAD_INDEX`` when the free head was executed.
    """

    model_config = ConfigDict(frozen=True)

    alpha: float
    selected_index: int | None
    emergency_stop: bool = False
    candidates: list[CandidateDiagnostics] = Field(default_factory=list)

    @property
    def free_head(self) -> bool:
        return self.selected_index == FREE_HEAD_INDEX


@dataclass(frozen=True)
class Selection:
    trajectory: npt.NDArray[np.float64]
    index: int | None
    diagnostics: PlanningDiagnostics

    @property
    def emergency_stop(self) -> bool:
        return self.diagnostics.emergency_stop


def _finite_or_none(value: float) -> float | None:
    return float(value) if np.isfinite(value) else None


def select(
    candidates: npt.ArrayLike,
    confidences: npt.ArrayLike,
    rule_scores: npt.ArrayLike,
    alpha: float,
    fallback: npt.NDArray[np.float64] | None = None,
    indices: npt.ArrayLike | None = None,
    reasons: tuple[str | None, ...] | None = None,
    feasible: npt.ArrayLike | None = None,
) -> Selection:
    """Pick ``argmax(pi_rule + alpha * pi_0)`` among candidates with a finite rule score.

    When every candidate is excluded the ``fallback`` trajectory is returned
    and flagged as an emergency stop.
    """
    if alpha < 0:
        raise InputError(f"alpha must be nonnegative, got {alpha}")
    trajectories = np.asarray(candidates, dtype=np.float64)
    pi_0 = np.asarray(confidences, dtype=np.float64)
    pi_rule = np.asarray(rule_scores, dtype=np.float64)
    if not (len(trajectories) == len(pi_0) == len(pi_rule)):
        raise InputError("candidates, confidences and rule scores must have equal length")
    ids = np.arange(len(pi_0)) if indices is None else np.asarray(indices, dtype=np.int64)
    combined = np.where(np.isfinite(pi_rule), pi_rule + alpha * pi_0, -np.inf)

    rows = [
        CandidateDiagnostics(
            index=int(ids[k]),
            pi_rule=_finite_or_none(pi_rule[k]),
            pi_0=float(pi_0[k]),
            combined=_finite_or_none(combined[k]),
            feasible=None if feasible is None else bool(np.asarray(feasible)[k]),
            excluded_reason=None if reasons is None else reasons[k],
        )
        for k in range(len(ids))
    ]

    if len(combined) == 0 or not np.isfinite(combined).any():
        if fallback is None:
            raise InputError("every candidate is excluded and no fallback trajectory was given")
        logger.debug(f"All {len(combined)} candidates excluded, falling back to an emergency stop")
        diagnostics = PlanningDiagnostics(alpha=alpha, selected_index=None, emergency_stop=True, candidates=rows)
        return Selection(trajectory=np.asarray(fallback, dtype=np.float64), index=None, diagnostics=diagnostics)

    best = int(np.argmax(combined))
    diagnostics = PlanningDiagnostics(alpha=alpha, selected_index=int(ids[best]), candidates=rows)
    return Selection(trajectory=trajectories[best], index=int(ids[best]), diagnostics=diagnostics)


def select_by_confidence(proposals: ProposalSet) -> Selection:
    """Most confident proposal, without any rule-based checks; the free head when the grid is empty."""
    if len(proposals) == 0:
        logger.debug("No proposals, executing the free head")
        diagnostics = PlanningDiagnostics(alpha=0.0, selected_index=FREE_HEAD_INDEX)
        return Selection(np.asarray(proposals.free, dtype=np.float64), FREE_HEAD_INDEX, diagnostics)
    best = int(np.argmax(proposals.confidences))
    return Selection(proposals.flat[best], best, PlanningDiagnostics(alpha=0.0, selected_index=best))


def candidates_for(proposals: ProposalSet, k: int) -> TopK:
    """Top-``k`` proposals, or the free head alone when there are no reference-line proposals."""
    if len(proposals) == 0:
        free = np.asarray(proposals.free, dtype=np.float64)[None]
        return TopK(trajectories=free, confidences=np.ones(1), indices=np.array([FREE_HEAD_INDEX], dtype=np.int64))
    return topk(proposals, k)


def postprocess(
    scenario: Scenario,
    proposals: ProposalSet,
    predictions: npt.NDArray[np.float64] | None = None,
    config: PostprocessConfig | None = None,
    metrics: MetricsConfig | None = None,
    vehicle: VehicleParams | None = None,
    tracker: TrackerParams | None = None,
    map_ctx: MapContext | None = None,
) -> Selection:
    """Top-K, forward simulation, rule evaluation and fused selection for one planning cycle."""
    config = config or PostprocessConfig()
    vehicle = vehicle or VehicleParams()
    tracker = tracker or TrackerParams()
    dt = scenario.dt
    av = scenario.av_state
    y0 = BicycleState(x=av.pose.x, y=av.pose.y, heading=av.pose.heading, speed=av.speed)
    if not config.enabled:
        return select_by_confidence(proposals)

    kept = candidates_for(proposals, config.top_k)
    fallback = emergency_stop_trajectory(y0, config.emergency_decel, kept.trajectories.shape[1], dt)
    rollouts = simulate_batch(
        y0, kept.trajectories, config.n_steps, kept.indices, vehicle, tracker, dt, config.feasibility_tolerance
    )
    evaluation = evaluate_rollouts(
        rollouts,
        proposals.predictions if predictions is None else predictions,
        scenario,
        config,
        metrics,
        map_ctx,
        dt,
    )
    selection = select(
        kept.trajectories,
        kept.confidences,
        evaluation.scores,
        config.alpha,
        fallback,
        kept.indices,
        evaluation.reasons,
        rollouts.feasible,
    )
    logger.debug(
        f"Selected proposal {selection.index} of {len(proposals)} "
        f"({int(evaluation.excluded.sum())} excluded, emergency_stop={selection.emergency_stop})"
    )
    return selection
