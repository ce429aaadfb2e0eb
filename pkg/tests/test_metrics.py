from __future__ import annotations

import numpy as np
import pytest

from clplan.metrics import (
    EgoTrace,
    MapContext,
    MetricReport,
    MetricsConfig,
    ObjectTrace,
    aggregate_score,
    at_fault_collision,
    build_report,
    comfort,
    drivable_compliance,
    driving_direction,
    min_time_to_collision,
    progress,
    speed_compliance,
    ttc_within_bound,
)
from clplan.utils.geometry import box_corners, boxes_overlap

CONFIG = MetricsConfig()
PERFECT = dict(
    no_at_fault_collision=1.0,
    ttc_within_bound=1.0,
    drivable_compliance=1.0,
    driving_direction=1.0,
    comfort=1.0,
    progress=1.0,
    speed_compliance=1.0,
)


def _ego(x, y=0.0, heading=0.0, speed=0.0) -> EgoTrace:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(x)
    return EgoTrace(
        xy=np.column_stack([x, np.broadcast_to(y, n)]),
        heading=np.broadcast_to(np.asarray(heading, dtype=float), n).copy(),
        speed=np.broadcast_to(np.asarray(speed, dtype=float), n).copy(),
        length=4.6,
        width=2.0,
    )


def _objects(x, y=0.0, heading=0.0, vx=0.0, vy=0.0, length=4.6, width=2.0) -> ObjectTrace:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = len(x)
    return ObjectTrace(
        ids=("obj",),
        xy=np.column_stack([x, np.broadcast_to(y, n)])[None],
        heading=np.full((1, n), heading),
        velocity=np.tile([vx, vy], (1, n, 1)).astype(float),
        length=np.array([length]),
        width=np.array([width]),
        valid=np.ones((1, n), dtype=bool),
    )


@pytest.fixture
def lane_map(straight_scenario) -> MapContext:
    return MapContext.from_scenario(straight_scenario)


def test_driving_into_stopped_box_is_at_fault(lane_map):
    t = np.arange(30) * 0.1
    at_fault, record = at_fault_collision(_ego(10.0 * t, speed=10.0), _objects(np.full(30, 15.0)), lane_map)
    assert at_fault
    assert record.object_id == "obj"
    assert record.reason == "front_or_side_contact"
    assert record.tick == 11


def test_rear_end_into_stationary_av_is_not_at_fault(lane_map):
    t = np.arange(30) * 0.1
    at_fault, record = at_fault_collision(_ego(np.zeros(30)), _objects(-20.0 + 10.0 * t, vx=10.0), lane_map)
    assert not at_fault and record is None


def test_rear_contact_while_moving_in_lane_is_not_at_fault(lane_map):
    t = np.arange(30) * 0.1
    ego = _ego(2.0 * t, speed=2.0)
    at_fault, _ = at_fault_collision(ego, _objects(-12.0 + 10.0 * t, vx=10.0), lane_map)
    assert not at_fault


def test_touching_boxes_do_not_collide(lane_map):
    at_fault, _ = at_fault_collision(_ego([0.0], speed=5.0), _objects([4.6]), lane_map)
    assert not at_fault


def test_ttc_examples():
    assert ttc_within_bound(_ego([0.0], speed=10.0), ObjectTrace.empty(1)) == 1.0
    ego, stopped = _ego([0.0], speed=10.0), _objects([9.6])
    assert min_time_to_collision(ego, stopped, CONFIG) == pytest.approx(0.5, abs=2e-3)
    assert ttc_within_bound(ego, stopped) == 0.0
    assert ttc_within_bound(ego, _objects([9.6], vx=15.0)) == 1.0


def test_ttc_skips_stationary_av():
    assert ttc_within_bound(_ego([0.0], speed=0.0), _objects([9.6], heading=np.pi, vx=-10.0)) == 1.0


def _dense_ttc(ego: EgoTrace, objects: ObjectTrace, step: float = 0.01) -> tuple[float, int]:
    taus = np.arange(1, int(round(CONFIG.ttc_horizon / step)) + 1) * step
    e_xy = ego.xy[0] + ego.velocity[0] * taus[:, None]
    o_xy = objects.xy[0, 0] + objects.velocity[0, 0] * taus[:, None]
    e = box_corners(e_xy[:, 0], e_xy[:, 1], ego.heading[0], ego.length, ego.width)
    o = box_corners(o_xy[:, 0], o_xy[:, 1], objects.heading[0, 0], objects.length[0], objects.width[0])
    hits = boxes_overlap(e, o)
    return (float(taus[np.argmax(hits)]) if hits.any() else np.inf), int(hits.sum())


def test_ttc_agrees_with_dense_projection():
    rng = np.random.default_rng(9)
    checked = 0
    while checked < 200:
        heading = rng.uniform(-np.pi, np.pi)
        rotation = np.array([[np.cos(heading), -np.sin(heading)], [np.sin(heading), np.cos(heading)]])
        ego_speed = rng.uniform(1.0, 15.0)
        local = np.array([rng.uniform(5.0, 40.0), rng.uniform(-2.5, 2.5)])
        agent_heading = heading + rng.uniform(-0.2, 0.2)
        agent_speed = rng.uniform(0.0, 15.0)
        x, y = rotation @ local
        ego = _ego([0.0], heading=heading, speed=ego_speed)
        objects = _objects(
            [x], y, agent_heading, agent_speed * np.cos(agent_heading), agent_speed * np.sin(agent_heading)
        )
        oracle, n_hits = _dense_ttc(ego, objects)
        # grazing contacts shorter than the coarse step and near-threshold hits are ambiguous
        if 0 < n_hits < 20 or abs(oracle - CONFIG.ttc_threshold) < 0.02:
            continue
        checked += 1
        assert ttc_within_bound(ego, objects) == float(oracle >= CONFIG.ttc_threshold)


def test_boolean_metrics_invariant_under_rigid_motion(make_scenario, make_lane):
    angle, shift = 0.8, np.array([30.0, -12.0])
    rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    start, end = rotation @ [-50.0, 0.0] + shift, rotation @ [200.0, 0.0] + shift
    moved_map = MapContext.from_scenario(make_scenario(lanes=[make_lane("lane_0", start=tuple(start), end=tuple(end))]))
    base_map = MapContext.from_scenario(make_scenario())

    t = np.arange(30) * 0.1
    xy = np.column_stack([10.0 * t, np.zeros(30)])
    moved_xy = xy @ rotation.T + shift
    base = EgoTrace(xy, np.zeros(30), np.full(30, 10.0), 4.6, 2.0)
    moved = EgoTrace(moved_xy, np.full(30, angle), np.full(30, 10.0), 4.6, 2.0)
    assert drivable_compliance(base, base_map) == drivable_compliance(moved, moved_map) == 1.0
    assert driving_direction(base, base_map) == driving_direction(moved, moved_map) == 1.0
    assert comfort(base) == comfort(moved) == 1.0

    obstacle = _objects(np.full(30, 15.0))
    moved_obstacle = _objects(np.full(30, (rotation @ [15.0, 0.0] + shift)[0]), (rotation @ [15.0, 0.0] + shift)[1], angle)
    assert at_fault_collision(base, obstacle, base_map)[0] == at_fault_collision(moved, moved_obstacle, moved_map)[0]


def test_drivable_compliance(lane_map):
    assert drivable_compliance(_ego(np.arange(10.0)), lane_map) == 1.0
    assert drivable_compliance(_ego(np.arange(10.0), y=10.0), lane_map) == 0.0


def test_driving_direction_levels(lane_map):
    t = np.arange(30) * 0.1
    assert driving_direction(_ego(10.0 * t, speed=10.0), lane_map) == 1.0
    assert driving_direction(_ego(-3.0 * t, heading=np.pi, speed=3.0), lane_map) == 0.5
    assert driving_direction(_ego(-10.0 * t, heading=np.pi, speed=10.0), lane_map) == 0.0


def test_comfort():
    t = np.arange(40) * 0.1
    assert comfort(_ego(10.0 * t, speed=10.0)) == 1.0
    braking = np.maximum(0.0, 10.0 - 10.0 * t)
    assert comfort(_ego(np.cumsum(braking) * 0.1, speed=braking)) == 0.0


def test_progress(lane_map):
    expert = np.column_stack([np.linspace(0.0, 80.0, 81), np.zeros(81)])
    assert progress(_ego(np.linspace(0.0, 40.0, 81)), expert, lane_map) == pytest.approx(0.5, abs=1e-6)
    assert progress(_ego(np.linspace(0.0, 100.0, 81)), expert, lane_map) == 1.0
    assert progress(_ego(np.zeros(81)), np.zeros((81, 2)), lane_map) == 1.0


def test_speed_compliance(lane_map):
    xs = np.arange(20.0)
    assert speed_compliance(_ego(xs, speed=15.0), lane_map) == 1.0
    assert speed_compliance(_ego(xs, speed=15.0 + 2.23 / 2), lane_map) == pytest.approx(0.5)
    assert speed_compliance(_ego(xs, speed=20.0), lane_map) == 0.0


def test_aggregate_examples():
    assert aggregate_score(PERFECT) == pytest.approx(1.0)
    assert aggregate_score({**PERFECT, "no_at_fault_collision": 0.0}) == 0.0
    assert aggregate_score({**PERFECT, "ttc_within_bound": 0.0}) == pytest.approx(11 / 16)
    assert aggregate_score({**PERFECT, "driving_direction": 0.5}) == pytest.approx(0.5)


def test_aggregate_bounded_and_monotone():
    rng = np.random.default_rng(3)
    for _ in range(200):
        components = {name: float(rng.choice([0.0, 0.5, 1.0])) for name in PERFECT}
        components["progress"] = float(rng.uniform())
        score = aggregate_score(components)
        assert 0.0 <= score <= 1.0
        for name in PERFECT:
            assert aggregate_score({**components, name: 1.0}) >= score - 1e-12


def test_report_carries_aggregate():
    report = build_report(**{**PERFECT, "comfort": 0.0})
    assert isinstance(report, MetricReport)
    assert report.aggregate == pytest.approx(14 / 16)
    assert aggregate_score(report) == report.aggregate


def test_batched_traces_score_per_row(lane_map):
    xs = np.arange(20.0)
    batch = EgoTrace(
        xy=np.stack([np.column_stack([xs, np.zeros(20)]), np.column_stack([xs, np.full(20, 10.0)])]),
        heading=np.zeros((2, 20)),
        speed=np.full((2, 20), 10.0),
        length=4.6,
        width=2.0,
    )
    np.testing.assert_array_equal(drivable_compliance(batch, lane_map), [1.0, 0.0])
