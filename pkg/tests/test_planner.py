from __future__ import annotations

import logging

import numpy as np
import pytest

from clplan.lane_graph import LaneGraphConfig
from clplan.planner import PLANNERS, ExpertReplayPlanner, RuleSelectionPlanner, build_planner
from clplan.postprocess import PostprocessConfig
from clplan.types import VX, VY, X, Y, InputError, ScenarioKind


def test_rule_planner_returns_selected_proposal(straight_scenario, config):
    planner = RuleSelectionPlanner.from_config(config)
    planner.initialize(straight_scenario)
    result = planner.plan(straight_scenario, 0)
    assert result.trajectory.shape == (80, 6)
    assert not result.emergency_stop
    assert result.diagnostics.selected_index is not None
    np.testing.assert_array_equal(result.trajectory, result.proposals.flat[result.diagnostics.selected_index])
    assert result.trajectory[-1, X] > result.trajectory[0, X]


def test_reference_lines_drop_far_and_reversed_lanes(make_scenario, make_lane):
    lanes = [
        make_lane("ahead"),
        make_lane("reversed", start=(200.0, 3.5), end=(-50.0, 3.5)),
        make_lane("far", start=(-50.0, 12.0), end=(200.0, 12.0)),
    ]
    scenario = make_scenario(lanes=lanes)
    lines = RuleSelectionPlanner(lane_graph=LaneGraphConfig(max_start_offset=5.0)).reference_lines(scenario)
    assert [line.source_lane_ids[0] for line in lines] == ["ahead"]


def test_no_usable_line_drives_free_head(make_scenario, make_lane):
    scenario = make_scenario(lanes=[make_lane("reversed", start=(200.0, 0.0), end=(-50.0, 0.0))])
    planner = RuleSelectionPlanner()
    assert planner.reference_lines(scenario) == []
    result = planner.plan(scenario, 3)
    assert not result.emergency_stop
    assert result.diagnostics.free_head
    np.testing.assert_array_equal(result.trajectory, result.proposals.free)


def test_blocked_free_head_stops_with_warning(make_scenario, make_track, caplog):
    scenario = make_scenario(lanes=[], agents=[make_track("parked", 15.0, 0.0)])
    with caplog.at_level(logging.WARNING, logger="clplan.planner"):
        result = RuleSelectionPlanner().plan(scenario, 3)
    assert result.emergency_stop
    assert "Tick 3: emergency stop" in caplog.text
    assert np.all(np.diff(np.hypot(result.trajectory[:, VX], result.trajectory[:, VY])) <= 1e-9)


def test_log_oracle_predictions_use_logged_future(make_scenario, make_track, straight_scenario):
    turning = make_track("a", 20.0, 3.5, speed=5.0)
    future = [(20.0, 3.5 + 0.01 * k) for k in range(1, 81)]
    scenario = make_scenario(agents=[turning.model_copy(update={"future_gt": future})])
    constant = RuleSelectionPlanner()
    oracle = RuleSelectionPlanner(postprocess=PostprocessConfig(prediction="log_oracle"))
    proposals = constant.plan(scenario, 0).proposals

    np.testing.assert_allclose(constant.predictions(scenario, proposals), proposals.predictions)
    np.testing.assert_allclose(oracle.predictions(scenario, proposals)[0], np.array(future))


def test_expert_replay_follows_the_log(generated):
    scenario = generated(ScenarioKind.STRAIGHT_CRUISE)
    planner = ExpertReplayPlanner()
    planner.initialize(scenario)
    trajectory = planner.plan(scenario, 0).trajectory
    assert trajectory.shape == (80, 6)
    np.testing.assert_allclose(trajectory[:, [X, Y]], np.array(scenario.av.future_gt))


def test_expert_replay_holds_final_pose(generated):
    scenario = generated(ScenarioKind.STRAIGHT_CRUISE)
    planner = ExpertReplayPlanner()
    planner.initialize(scenario)
    last = scenario.av.replay[-1].pose
    trajectory = planner.plan(scenario, len(scenario.av.replay) + 10).trajectory
    np.testing.assert_allclose(trajectory[:, X], last.x)
    np.testing.assert_allclose(trajectory[:, Y], last.y)
    np.testing.assert_array_equal(trajectory[:, [VX, VY]], 0.0)


def test_expert_replay_needs_log(straight_scenario):
    with pytest.raises(InputError):
        ExpertReplayPlanner().initialize(straight_scenario)


def test_build_planner(config):
    assert set(PLANNERS) == {"rule_selection", "expert_replay"}
    assert isinstance(build_planner("rule_selection", config), RuleSelectionPlanner)
    assert isinstance(build_planner("expert_replay", config), ExpertReplayPlanner)
    with pytest.raises(InputError):
        build_planner("learned", config)
