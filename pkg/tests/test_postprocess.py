from __future__ import annotations

import json

import numpy as np
import pytest

from clplan.control import BicycleState
from clplan.lane_graph import find_reference_lines
from clplan.metrics import MapContext
from clplan.postprocess import (
    FREE_HEAD_INDEX,
    PostprocessConfig,
    emergency_stop_trajectory,
    evaluate_rollouts,
    forward_simulate,
    postprocess,
    red_light_boxes,
    select,
    simulate_batch,
    topk,
)
from clplan.proposer import ProposalSet, generate_proposals, predict_agents
from clplan.types import COS, SIN, TRAJECTORY_CHANNELS, VX, VY, X, Y, InputError, TrafficLightState

ALPHAS = (0.0, 0.1, 0.3, 0.9)


def _path(xy, speed) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    heading = np.arctan2(np.gradient(xy[:, 1]), np.gradient(xy[:, 0]))
    speed = np.broadcast_to(np.asarray(speed, dtype=float), len(xy))
    traj = np.zeros((len(xy), TRAJECTORY_CHANNELS))
    traj[:, [X, Y]] = xy
    traj[:, COS], traj[:, SIN] = np.cos(heading), np.sin(heading)
    traj[:, VX], traj[:, VY] = speed * np.cos(heading), speed * np.sin(heading)
    return traj


def _straight(speed: float = 10.0, y: float = 0.0, n: int = 80) -> np.ndarray:
    t = (np.arange(n) + 1) * 0.1
    return _path(np.column_stack([speed * t, np.full(n, y)]), speed)


def _proposal_set(confidences) -> ProposalSet:
    confidences = np.asarray(confidences, dtype=float)
    grid = np.stack([_straight(y=float(k)) for k in range(len(confidences))]).reshape(1, len(confidences), 80, 6)
    return ProposalSet(trajectories=grid, confidences=confidences, free=_straight(), predictions=np.zeros((0, 80, 2)))


def test_topk_keeps_most_confident():
    proposals = _proposal_set([0.1, 0.4, 0.2, 0.3])
    kept = topk(proposals, 2)
    np.testing.assert_array_equal(kept.indices, [1, 3])
    np.testing.assert_array_equal(kept.trajectories[0], proposals.flat[1])
    assert topk(proposals, 1).indices.tolist() == [1]


def test_topk_larger_than_set_keeps_everything():
    proposals = _proposal_set([0.1, 0.4, 0.2, 0.3])
    kept = topk(proposals, 10)
    assert sorted(kept.indices.tolist()) == [0, 1, 2, 3]
    for row, index in zip(kept.trajectories, kept.indices):
        np.testing.assert_array_equal(row, proposals.flat[index])


def test_topk_ties_prefer_lower_index():
    proposals = _proposal_set([0.25, 0.25, 0.25, 0.25])
    np.testing.assert_array_equal(topk(proposals, 2).indices, [0, 1])
    with pytest.raises(InputError):
        topk(proposals, 0)


def test_feasible_straight_rollout():
    rollout = forward_simulate(BicycleState(x=0.0, y=0.0, heading=0.0, speed=10.0), _straight())
    assert rollout.states.shape == (81, 4)
    np.testing.assert_array_equal(rollout.states[0], [0.0, 0.0, 0.0, 10.0])
    assert rollout.deviation < 0.2
    assert rollout.feasible


def test_zero_speed_hold():
    hold = np.zeros((80, TRAJECTORY_CHANNELS))
    hold[:, COS] = 1.0
    rollout = forward_simulate(BicycleState(x=0.0, y=0.0, heading=0.0, speed=0.0), hold)
    assert np.abs(rollout.states[:, :2]).max() < 0.05


def test_sharp_turn_is_infeasible():
    angle = np.linspace(0.0, np.pi / 2, 40)
    turn = np.column_stack([2.0 * np.sin(angle), 2.0 - 2.0 * np.cos(angle)])
    ahead = turn[-1] + np.column_stack([np.zeros(40), np.arange(1, 41) * 0.8])
    rollout = forward_simulate(BicycleState(x=0.0, y=0.0, heading=0.0, speed=8.0), _path(np.vstack([turn, ahead]), 8.0))
    assert rollout.deviation > 1.0
    assert not rollout.feasible


def test_emergency_stop_profile():
    traj = emergency_stop_trajectory(BicycleState(x=0.0, y=0.0, heading=0.0, speed=8.0), decel=4.0)
    assert traj[-1, X] == pytest.approx(8.0)
    np.testing.assert_allclose(traj[19:, VX], 0.0, atol=1e-12)
    assert np.all(np.diff(traj[:, X]) >= 0)


def test_rollout_into_agent_is_excluded(make_scenario, make_track):
    scenario = make_scenario(agents=[make_track("lead", 20.0, 0.0)])
    y0 = BicycleState(x=0.0, y=0.0, heading=0.0, speed=10.0)
    stop = emergency_stop_trajectory(y0)
    rollouts = simulate_batch(y0, np.stack([_straight(), stop, stop]))
    evaluation = evaluate_rollouts(rollouts, predict_agents(scenario), scenario)
    assert evaluation.excluded.tolist() == [True, False, False]
    assert evaluation.scores[0] == -np.inf
    assert evaluation.reasons[0] == "at_fault_collision:lead"
    assert np.isfinite(evaluation.scores[1])
    assert evaluation.scores[1] == evaluation.scores[2]


def test_leaving_drivable_area_scores_zero(straight_scenario):
    t = (np.arange(80) + 1) * 0.1
    swerve = _path(np.column_stack([10.0 * t, 10.0 * (1 - np.cos(np.pi * t / 8.0)) / 2]), 10.0)
    rollouts = simulate_batch(BicycleState(x=0.0, y=0.0, heading=0.0, speed=10.0), np.stack([_straight(), swerve]))
    evaluation = evaluate_rollouts(rollouts, np.zeros((0, 80, 2)), straight_scenario)
    assert not evaluation.excluded.any()
    assert evaluation.components["drivable_compliance"].tolist() == [1.0, 0.0]
    assert evaluation.scores[1] == 0.0
    assert evaluation.scores[0] > 0.0


def test_red_light_box_only_for_lanes_ahead(make_scenario, make_lane):
    lanes = [
        make_lane("a", start=(-50.0, 0.0), end=(30.0, 0.0), successors=("b",)),
        make_lane("b", start=(30.0, 0.0), end=(200.0, 0.0), traffic_light=TrafficLightState.RED),
    ]
    scenario = make_scenario(lanes=lanes)
    boxes = red_light_boxes(scenario, MapContext.from_scenario(scenario), 5)
    assert boxes.ids == ("red_light:b",)
    np.testing.assert_allclose(boxes.xy[0, 0], [30.5, 0.0])
    assert boxes.virtual.tolist() == [True]

    inside = make_scenario(lanes=[make_lane("a", traffic_light=TrafficLightState.RED)])
    assert len(red_light_boxes(inside, MapContext.from_scenario(inside), 5)) == 0


def test_selection_example():
    candidates = np.stack([_straight(), _straight(y=1.0)])
    selection = select(candidates, [0.9, 0.1], [0.8, 0.9], 0.3)
    assert selection.index == 0
    np.testing.assert_array_equal(selection.trajectory, candidates[0])
    assert [c.combined for c in selection.diagnostics.candidates] == pytest.approx([1.07, 0.93])
    assert select(candidates, [0.9, 0.1], [0.8, 0.9], 0.0).index == 1


def test_alpha_zero_is_rule_argmax():
    rng = np.random.default_rng(0)
    candidates = np.zeros((12, 3, TRAJECTORY_CHANNELS))
    for _ in range(500):
        rule = rng.uniform(size=12)
        rule[rng.uniform(size=12) < 0.3] = -np.inf
        if not np.isfinite(rule).any():
            continue
        assert select(candidates, rng.uniform(size=12), rule, 0.0).index == int(np.argmax(rule))


def test_excluded_never_selected():
    rng = np.random.default_rng(1)
    candidates = rng.normal(size=(10, 3, TRAJECTORY_CHANNELS))
    for _ in range(200):
        rule = rng.uniform(size=10)
        excluded = rng.uniform(size=10) < 0.5
        excluded[rng.integers(10)] = False
        rule[excluded] = -np.inf
        confidences = rng.uniform(size=10)
        for alpha in ALPHAS:
            selection = select(candidates, confidences, rule, alpha)
            assert not excluded[selection.index]
            np.testing.assert_array_equal(selection.trajectory, candidates[selection.index])


def test_constant_rule_offset_keeps_choice():
    rng = np.random.default_rng(2)
    candidates = np.zeros((8, 3, TRAJECTORY_CHANNELS))
    for _ in range(100):
        rule, confidences = rng.uniform(size=8), rng.uniform(size=8)
        assert select(candidates, confidences, rule, 0.3).index == select(candidates, confidences, rule + 5.0, 0.3).index


def test_all_excluded_falls_back():
    candidates = np.stack([_straight(), _straight(y=1.0)])
    fallback = emergency_stop_trajectory(BicycleState(x=0.0, y=0.0, heading=0.0, speed=10.0))
    selection = select(candidates, [0.5, 0.5], [-np.inf, -np.inf], 0.3, fallback, reasons=("at_fault_collision:a", None))
    assert selection.emergency_stop and selection.index is None
    np.testing.assert_array_equal(selection.trajectory, fallback)
    document = json.loads(selection.diagnostics.model_dump_json())
    assert document["candidates"][0] == {
        "index": 0,
        "pi_rule": None,
        "pi_0": 0.5,
        "combined": None,
        "feasible": None,
        "excluded_reason": "at_fault_collision:a",
    }
    with pytest.raises(InputError):
        select(candidates, [0.5, 0.5], [-np.inf, -np.inf], 0.3)
    with pytest.raises(InputError):
        select(candidates, [0.5, 0.5], [0.1, 0.2], -0.1)


def test_pipeline_avoids_stopped_lead(make_scenario, make_track):
    scenario = make_scenario(agents=[make_track("lead", 30.0, 0.0)])
    proposals = generate_proposals(scenario, find_reference_lines(scenario))
    selection = postprocess(scenario, proposals)
    assert not selection.emergency_stop
    assert selection.index is not None
    np.testing.assert_array_equal(selection.trajectory, proposals.flat[selection.index])
    assert selection.trajectory[:, X].max() + 2.3 < 30.0 - 2.3


def test_disabled_pipeline_takes_most_confident(straight_scenario):
    proposals = generate_proposals(straight_scenario, find_reference_lines(straight_scenario))
    selection = postprocess(straight_scenario, proposals, config=PostprocessConfig(enabled=False))
    assert selection.index == int(np.argmax(proposals.confidences))


def test_no_proposals_executes_free_head(straight_scenario):
    proposals = generate_proposals(straight_scenario, [])
    assert len(proposals) == 0
    selection = postprocess(straight_scenario, proposals)
    assert not selection.emergency_stop
    assert selection.index == FREE_HEAD_INDEX and selection.diagnostics.free_head
    np.testing.assert_array_equal(selection.trajectory, proposals.free)
    assert [c.index for c in selection.diagnostics.candidates] == [FREE_HEAD_INDEX]


def test_lane_free_scene_drives_free_head(make_scenario):
    scenario = make_scenario(lanes=[])
    proposals = generate_proposals(scenario, find_reference_lines(scenario))
    selection = postprocess(scenario, proposals)
    assert not selection.emergency_stop
    np.testing.assert_array_equal(selection.trajectory, proposals.free)


def test_excluded_free_head_means_emergency_stop(make_scenario, make_track):
    scenario = make_scenario(lanes=[], agents=[make_track("parked", 15.0, 0.0)])
    proposals = generate_proposals(scenario, find_reference_lines(scenario))
    selection = postprocess(scenario, proposals)
    assert selection.emergency_stop and selection.index is None
    assert selection.diagnostics.candidates[0].excluded_reason == "at_fault_collision:parked"
    assert selection.trajectory[-1, X] == pytest.approx(10.0**2 / (2 * 4.0))


def test_disabled_pipeline_without_proposals_takes_free_head(straight_scenario):
    proposals = generate_proposals(straight_scenario, [])
    selection = postprocess(straight_scenario, proposals, config=PostprocessConfig(enabled=False))
    assert selection.diagnostics.free_head and not selection.emergency_stop
    np.testing.assert_array_equal(selection.trajectory, proposals.free)
