from __future__ import annotations

import numpy as np
import pytest

from clplan.lane_graph import find_reference_lines
from clplan.proposer import (
    IdmParams,
    ProposerConfig,
    constant_velocity_trajectory,
    generate_proposals,
    idm_acceleration,
    predict_agents,
)
from clplan.types import COS, SIN, VX, VY, X, Y

IDM = IdmParams()


def test_free_road_at_desired_speed_is_equilibrium():
    assert idm_acceleration(15.0, 15.0, np.inf, 0.0, IDM) == pytest.approx(0.0, abs=1e-12)
    assert idm_acceleration(0.0, 15.0, np.inf, 0.0, IDM) == pytest.approx(IDM.a_max)


def test_following_equilibrium_gap():
    v, v_des = 10.0, 15.0
    s_star = IDM.s0 + v * IDM.time_headway
    gap = s_star / np.sqrt(1.0 - (v / v_des) ** IDM.delta)
    assert idm_acceleration(v, v_des, gap, 0.0, IDM) == pytest.approx(0.0, abs=1e-9)


def test_nonpositive_gap_brakes_fully():
    assert idm_acceleration(5.0, 15.0, 0.0, 5.0, IDM) == -IDM.b_max
    assert idm_acceleration(5.0, 15.0, 0.1, 5.0, IDM) == -IDM.b_max


def test_idm_vectorized():
    accel = idm_acceleration(np.array([0.0, 15.0]), 15.0, np.array([np.inf, np.inf]), 0.0, IDM)
    assert accel.shape == (2,)


def test_settles_behind_stopped_leader():
    gap, v = 100.0, 10.0
    for _ in range(1200):
        a = idm_acceleration(v, 15.0, gap, v, IDM)
        gap -= v * 0.1
        v = max(0.0, v + a * 0.1)
    assert v == pytest.approx(0.0, abs=0.05)
    assert gap == pytest.approx(IDM.s0, rel=0.05)


def test_constant_velocity_trajectory():
    traj = constant_velocity_trajectory(1.0, 2.0, 0.0, 10.0, 0.0, horizon=5)
    np.testing.assert_allclose(traj[:, X], [2.0, 3.0, 4.0, 5.0, 6.0])
    np.testing.assert_allclose(traj[:, Y], 2.0)
    np.testing.assert_allclose(traj[:, VX], 10.0)


def test_agent_predictions(make_scenario, make_track):
    scenario = make_scenario(agents=[make_track("a", 10.0, 3.5, speed=5.0)])
    predictions = predict_agents(scenario)
    assert predictions.shape == (1, 80, 2)
    np.testing.assert_allclose(predictions[0, 0], [10.5, 3.5])
    np.testing.assert_allclose(predictions[0, -1], [50.0, 3.5])


def test_proposal_set_invariants(straight_scenario):
    refs = find_reference_lines(straight_scenario)
    proposals = generate_proposals(straight_scenario, refs, n_lon=12)
    assert proposals.trajectories.shape == (1, 12, 80, 6)
    assert len(proposals) == 12
    assert proposals.flat.shape == (12, 80, 6)
    assert proposals.confidences.sum() == pytest.approx(1.0)
    assert np.all(proposals.confidences >= 0)
    grid = proposals.trajectories
    np.testing.assert_allclose(grid[..., COS] ** 2 + grid[..., SIN] ** 2, 1.0)
    assert np.all(np.hypot(grid[..., VX], grid[..., VY]) >= 0)
    np.testing.assert_allclose(grid[:, :, 0, X], 1.0, atol=0.05)
    np.testing.assert_allclose(grid[..., Y], 0.0, atol=1e-6)


def test_stop_profiles_end_before_their_stop_points(straight_scenario):
    refs = find_reference_lines(straight_scenario)
    proposals = generate_proposals(straight_scenario, refs, n_lon=12)
    stops = (np.arange(11) + 1) * refs[0].length / 11
    final_x = proposals.trajectories[0, :11, -1, X]
    # the nearest stop points lie inside the braking distance from 10 m/s
    assert np.all(final_x[2:] <= stops[2:] + 0.5)
    assert proposals.trajectories[0, 11, -1, X] >= final_x.max() - 1e-6


def test_free_profile_beats_early_stop_on_open_road(straight_scenario):
    proposals = generate_proposals(straight_scenario, find_reference_lines(straight_scenario), n_lon=12)
    assert proposals.confidences[11] > proposals.confidences[0]


def test_stopped_leader_bounds_every_proposal(make_scenario, make_track):
    scenario = make_scenario(agents=[make_track("lead", 40.0, 0.0)])
    proposals = generate_proposals(scenario, find_reference_lines(scenario), n_lon=12)
    front = proposals.trajectories[..., X] + 2.3
    assert front.max() < 40.0 - 2.3


def test_adjacent_lane_agent_is_not_a_leader(make_scenario, make_track):
    clear = make_scenario()
    beside = make_scenario(agents=[make_track("side", 20.0, 3.5)])
    a = generate_proposals(clear, find_reference_lines(clear), n_lon=4)
    b = generate_proposals(beside, find_reference_lines(beside), n_lon=4)
    np.testing.assert_allclose(a.trajectories, b.trajectories)


def test_no_reference_lines_gives_empty_set(straight_scenario):
    proposals = generate_proposals(straight_scenario, [], n_lon=12)
    assert len(proposals) == 0
    assert proposals.free.shape == (80, 6)


def test_offset_av_blends_back_onto_line(make_scenario, make_lane):
    scenario = make_scenario(lanes=[make_lane("l", start=(-50.0, 1.0), end=(200.0, 1.0))])
    config = ProposerConfig(blend_length=20.0)
    proposals = generate_proposals(scenario, find_reference_lines(scenario), n_lon=4, config=config)
    free = proposals.trajectories[0, -1]
    assert free[0, Y] == pytest.approx(0.0, abs=0.05)
    past_blend = free[:, X] > 25.0
    np.testing.assert_allclose(free[past_blend, Y], 1.0, atol=1e-6)


def test_gap_at_desired_spacing_brakes_at_a_max():
    s_star = IDM.s0 + 10.0 * IDM.time_headway
    assert idm_acceleration(10.0, 10.0, s_star, 0.0, IDM) == pytest.approx(-IDM.a_max)


def test_free_flow_at_speed_limit_is_straight(make_scenario):
    scenario = make_scenario(av_speed=15.0)
    proposals = generate_proposals(scenario, find_reference_lines(scenario), n_lon=12)
    free_flow = proposals.trajectories[0, -1]
    np.testing.assert_allclose(free_flow[:, X], 1.5 * (np.arange(80) + 1), atol=1e-6)
    np.testing.assert_allclose(np.hypot(free_flow[:, VX], free_flow[:, VY]), 15.0, atol=1e-6)
    np.testing.assert_allclose(proposals.free[:, X], free_flow[:, X], atol=1e-6)


def test_stop_profiles_never_speed_up_after_braking(straight_scenario):
    proposals = generate_proposals(straight_scenario, find_reference_lines(straight_scenario), n_lon=7)
    speeds = np.hypot(proposals.trajectories[0, :-1, :, VX], proposals.trajectories[0, :-1, :, VY])
    for row in speeds:
        change = np.diff(row)
        braking = np.flatnonzero(change < 0)
        if braking.size:
            assert np.all(change[braking[0] :] <= 1e-9)
