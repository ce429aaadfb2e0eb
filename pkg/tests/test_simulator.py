from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from clplan.planner import ExpertReplayPlanner, Planner, PlanResult, RuleSelectionPlanner
from clplan.scene import save_scenario
from clplan.simulator import (
    SimulatorConfig,
    evaluate_log,
    generate_scenario,
    generate_suite,
    load_simlog,
    run_benchmark,
    run_episode,
    save_simlog,
)
from clplan.simulator.benchmark import RESULT_COLUMNS
from clplan.types import AgentPolicy, InputError, ScenarioKind, TrafficLightState

SHORT = SimulatorConfig(n_ticks=30)


def _at_fault(log) -> list:
    return [e for e in log.events if e.kind == "collision" and e.at_fault]


def _short(config, n_ticks: int = 20):
    return config.model_copy(update={"simulator": config.simulator.model_copy(update={"n_ticks": n_ticks})})


class _FailingPlanner(Planner):
    name = "failing"

    def __init__(self, fail_at: int):
        self.fail_at = fail_at
        self.inner = RuleSelectionPlanner()

    def initialize(self, scenario):
        self.inner.initialize(scenario)

    def plan(self, observation, tick) -> PlanResult:
        if tick == self.fail_at:
            raise RuntimeError("network exploded")
        return self.inner.plan(observation, tick)


def test_episode_is_deterministic(generated):
    scenario = generated(ScenarioKind.STOPPED_LEAD)
    first = run_episode(scenario, RuleSelectionPlanner(), config=SHORT)
    second = run_episode(scenario, RuleSelectionPlanner(), config=SHORT)
    assert save_simlog(first) == save_simlog(second)


def test_log_layout_and_round_trip(generated):
    log = run_episode(generated(ScenarioKind.STRAIGHT_CRUISE), RuleSelectionPlanner(), seed=4, config=SHORT)
    assert log.n_ticks == 30 and len(log.av) == 31
    assert not log.failed and log.seed == 4
    assert [c.tick for c in log.cycles] == list(range(30))
    assert [c.tick for c in log.cycles if c.proposals is not None] == [0, 10, 20]
    assert all(len(a.x) == 31 for a in log.agents)
    assert load_simlog(save_simlog(log)) == log


def test_diagnostics_can_be_switched_off(generated):
    config = SimulatorConfig(n_ticks=15, record_diagnostics=False, snapshot_every=0)
    log = run_episode(generated(ScenarioKind.STRAIGHT_CRUISE), RuleSelectionPlanner(), config=config)
    assert log.cycles == []


def test_planner_exception_ends_episode(generated):
    log = run_episode(generated(ScenarioKind.STRAIGHT_CRUISE), _FailingPlanner(5), config=SHORT)
    assert log.failed
    assert "tick 5" in log.failure and "network exploded" in log.failure
    assert len(log.av) == 6
    assert [e.kind for e in log.events if e.kind == "planner_failure"] == ["planner_failure"]


def test_initialize_failure_ends_episode(straight_scenario):
    log = run_episode(straight_scenario, ExpertReplayPlanner(), config=SHORT)
    assert log.failed and log.n_ticks == 0
    assert log.events[0].kind == "planner_failure" and log.events[0].tick == 0


def test_expert_replay_scores_well(generated):
    scenario = generated(ScenarioKind.STRAIGHT_CRUISE)
    log = run_episode(scenario, ExpertReplayPlanner())
    report, collisions = evaluate_log(log, scenario)
    assert not any(c.at_fault for c in collisions)
    assert report.progress == pytest.approx(1.0, abs=0.02)
    assert report.aggregate > 0.9


def test_scenario_documents_are_reproducible():
    for kind in ScenarioKind:
        first = save_scenario(generate_scenario(kind, seed=3))
        assert first == save_scenario(generate_scenario(kind, seed=3))
        assert first != save_scenario(generate_scenario(kind, seed=4))


def test_generate_suite():
    suite = generate_suite([ScenarioKind.STOPPED_LEAD, "red_light"], 2, seed=10)
    assert [s.metadata.id for s in suite] == ["stopped_lead_0010", "stopped_lead_0011", "red_light_0010", "red_light_0011"]
    with pytest.raises(InputError):
        generate_suite(["merge"], 1)
    with pytest.raises(InputError):
        generate_suite([ScenarioKind.STOPPED_LEAD], 0)


def test_overlapping_start_fails_initialization(make_scenario, make_track, straight_scenario, config):
    crashed = make_scenario(agents=[make_track("stuck", 2.0, 0.0)])
    result = run_benchmark([crashed, straight_scenario], _short(config))
    statuses = [r.status for r in result.results]
    assert statuses == ["failed_init", "ok"]
    assert "stuck" in result.results[0].failure
    assert result.results[0].score is None
    assert result.mean_score == pytest.approx(result.results[1].score)
    assert result.summary()["failed_init"] == 1


def test_benchmark_needs_scenarios(config):
    with pytest.raises(InputError):
        run_benchmark([], config)


def test_benchmark_writes_tables(straight_scenario, config, tmp_path):
    result = run_benchmark([straight_scenario], _short(config))
    paths = result.write(tmp_path, timing=True)
    assert [p.name for p in paths] == ["results.csv", "summary.json", "timing.csv"]
    frame = pd.read_csv(tmp_path / "results.csv")
    assert list(frame.columns) == RESULT_COLUMNS
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["scenarios"] == 1 and summary["failed_init"] == 0


@pytest.mark.slow
def test_worker_count_does_not_change_scores(config):
    suite = generate_suite([ScenarioKind.STOPPED_LEAD, ScenarioKind.LANE_BLOCKED], 2)
    config = _short(config, 40)
    serial = run_benchmark(suite, config, workers=1).to_frame()
    parallel = run_benchmark(suite, config, workers=2).to_frame()
    pd.testing.assert_frame_equal(serial, parallel)


@pytest.mark.slow
@pytest.mark.parametrize("kind", list(ScenarioKind))
def test_expert_replay_never_at_fault(kind, generated):
    log = run_episode(generated(kind), ExpertReplayPlanner())
    assert _at_fault(log) == []


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_stops_behind_stopped_lead(seed, generated):
    scenario = generated(ScenarioKind.STOPPED_LEAD, seed)
    log = run_episode(scenario, RuleSelectionPlanner())
    lead = scenario.agents[0].current.pose
    final = log.av[-1]
    assert _at_fault(log) == []
    assert (lead.x - 2.3) - (final.x + 2.3) >= 2.0
    assert final.speed < 0.5


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
def test_halts_at_red_light(seed, generated):
    scenario = generated(ScenarioKind.RED_LIGHT, seed)
    stop_line = scenario.lanes_by_id["junction_in"].centerline[0][0]
    assert scenario.lanes_by_id["junction_in"].traffic_light == TrafficLightState.RED
    log = run_episode(scenario, RuleSelectionPlanner())
    front = np.array([f.x for f in log.av]) + 2.3
    assert front.max() <= stop_line + 0.5
    assert _at_fault(log) == []


@pytest.mark.slow
@pytest.mark.parametrize("kind", list(ScenarioKind))
def test_reactive_agents_cause_no_at_fault_collisions(kind, generated):
    log = run_episode(generated(kind), RuleSelectionPlanner(), policy=AgentPolicy.REACTIVE)
    assert not log.failed
    assert _at_fault(log) == []
