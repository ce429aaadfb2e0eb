"""Planners driven by the closed-loop simulator.

A planner is initialized once per episode with the full scenario and then
asked for a trajectory every tick, given only the observation window.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from clplan.control import TrackerParams, VehicleParams
from clplan.lane_graph import LaneGraphConfig, ReferenceLine, find_reference_lines
from clplan.metrics import MapContext, MetricsConfig
from clplan.postprocess import PlanningDiagnostics, PostprocessConfig, postprocess
from clplan.proposer import IdmParams, ProposalSet, ProposerConfig, generate_proposals
from clplan.types import COS, FUTURE_STEPS, SIN, TRAJECTORY_CHANNELS, VX, VY, X, Y, InputError, Scenario
from clplan.utils.geometry import normalize_angle

if TYPE_CHECKING:
    from clplan.config import AppConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlanResult:
    trajectory: npt.NDArray[np.float64]
    proposals: ProposalSet | None = None
    diagnostics: PlanningDiagnostics | None = None

    @property
    def emergency_stop(self) -> bool:
        return self.diagnostics is not None and self.diagnostics.emergency_stop


class Planner(ABC):
    name: str = "planner"

    @abstractmethod
    def initialize(self, scenario: Scenario) -> None:
        pass

    @abstractmethod
    def plan(self, observation: Scenario, tick: int) -> PlanResult:
        pass


class RuleSelectionPlanner(Planner):
    """Rule-based proposals followed by rollout scoring and fused selection."""

    name = "rule_selection"

    def __init__(
        self,
        lane_graph: LaneGraphConfig | None = None,
        proposer: ProposerConfig | None = None,
        idm: IdmParams | None = None,
        vehicle: VehicleParams | None = None,
        tracker: TrackerParams | None = None,
        postprocess: PostprocessConfig | None = None,
        metrics: MetricsConfig | None = None,
    ):
        self.lane_graph = lane_graph or LaneGraphConfig()
        self.proposer = proposer or ProposerConfig()
        self.idm = idm or IdmParams()
        self.vehicle = vehicle or VehicleParams()
        self.tracker = tracker or TrackerParams()
        self.postprocess = postprocess or PostprocessConfig()
        self.metrics = metrics or MetricsConfig()
        self._map_ctx: MapContext | None = None
        self._map_lanes: list | None = None

    @classmethod
    def from_config(cls, config: "AppConfig") -> "RuleSelectionPlanner":
        return cls(
            lane_graph=config.lane_graph,
            proposer=config.proposer,
            idm=config.idm,
            vehicle=config.vehicle,
            tracker=config.tracker,
            postprocess=config.postprocess,
            metrics=config.metrics,
        )

    def initialize(self, scenario: Scenario) -> None:
        self._map_ctx = MapContext.from_scenario(scenario, self.metrics)
        self._map_lanes = scenario.lanes

    def _map_context(self, observation: Scenario) -> MapContext:
        if self._map_ctx is None or self._map_lanes is not observation.lanes:
            self.initialize(observation)
        return self._map_ctx

    def reference_lines(self, observation: Scenario) -> list[ReferenceLine]:
        """Reference lines starting near the AV and pointing the way it faces."""
        cfg = self.lane_graph
        lines = find_reference_lines(observation, cfg.r_ref, cfg.length, cfg.n_points)
        pose = observation.av_state.pose
        kept = []
        for line in lines:
            offset = float(np.linalg.norm(line.points[0] - pose.xy))
            heading_error = abs(normalize_angle(float(line.headings[0]) - pose.heading))
            if offset <= cfg.max_start_offset and heading_error <= cfg.max_heading_offset:
                kept.append(line)
        return kept

    def predictions(self, observation: Scenario, proposals: ProposalSet) -> npt.NDArray[np.float64]:
        if self.postprocess.prediction == "constant_velocity":
            return proposals.predictions
        predictions = proposals.predictions.copy()
        for i, agent in enumerate(observation.agents):
            if agent.future_gt is not None and agent.current.valid:
                horizon = min(len(agent.future_gt), predictions.shape[1])
                predictions[i, :horizon] = np.asarray(agent.future_gt[:horizon], dtype=np.float64)
        return predictions

    def plan(self, observation: Scenario, tick: int) -> PlanResult:
        refs = self.reference_lines(observation)
        if not refs:
            logger.debug(f"Tick {tick}: no reference lines, falling back to the free head")
        proposals = generate_proposals(
            observation,
            refs,
            n_lon=self.proposer.n_lon,
            config=self.proposer,
            idm=self.idm,
            vehicle=self.vehicle,
            dt=observation.dt,
        )
        selection = postprocess(
            observation,
            proposals,
            self.predictions(observation, proposals),
            config=self.postprocess,
            metrics=self.metrics,
            vehicle=self.vehicle,
            tracker=self.tracker,
            map_ctx=self._map_context(observation),
        )
        if selection.emergency_stop:
            logger.warning(f"Tick {tick}: emergency stop, {len(refs)} reference lines, {len(proposals)} proposals")
        return PlanResult(trajectory=selection.trajectory, proposals=proposals, diagnostics=selection.diagnostics)


class ExpertReplayPlanner(Planner):
    """Returns the AV's logged future from the current tick on."""

    name = "expert_replay"

    def __init__(self, horizon: int = FUTURE_STEPS):
        self.horizon = horizon
        self._log: npt.NDArray[np.float64] | None = None

    def initialize(self, scenario: Scenario) -> None:
        frames = scenario.av.replay
        if not frames:
            raise InputError("expert replay needs an AV replay log")
        self._log = np.array(
            [[s.pose.x, s.pose.y, s.pose.heading, s.velocity[0], s.velocity[1]] for s in frames], dtype=np.float64
        )

    def plan(self, observation: Scenario, tick: int) -> PlanResult:
        if self._log is None:
            self.initialize(observation)
        log = self._log
        idx = np.minimum(np.arange(tick + 1, tick + 1 + self.horizon), len(log) - 1)
        frames = log[idx]
        # Past the end of the log the AV holds its final pose.
        frames[idx == len(log) - 1, 3:] = 0.0
        traj = np.empty((self.horizon, TRAJECTORY_CHANNELS))
        traj[:, X] = frames[:, 0]
        traj[:, Y] = frames[:, 1]
        traj[:, COS] = np.cos(frames[:, 2])
        traj[:, SIN] = np.sin(frames[:, 2])
        traj[:, VX] = frames[:, 3]
        traj[:, VY] = frames[:, 4]
        return PlanResult(trajectory=traj)


PLANNERS: dict[str, type[Planner]] = {
    RuleSelectionPlanner.name: RuleSelectionPlanner,
    ExpertReplayPlanner.name: ExpertReplayPlanner,
}


def build_planner(name: str, config: "AppConfig") -> Planner:
    if name not in PLANNERS:
        raise InputError(f"unknown planner {name!r}; choose from {sorted(PLANNERS)}")
    planner_cls = PLANNERS[name]
    if planner_cls is RuleSelectionPlanner:
        return RuleSelectionPlanner.from_config(config)
    return planner_cls()
