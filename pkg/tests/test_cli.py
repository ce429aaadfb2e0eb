from __future__ import annotations

import json
import os
import xml.etree.ElementTree as ET

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from clplan.cli.__main__ import cli
from clplan.scene import load_scenario, save_scenario
from clplan.types import ExitCode, Polarity, ScenarioKind

SHORT = ["--set", "simulator.n_ticks=20"]


@pytest.fixture
def runner(tmp_path, monkeypatch) -> CliRunner:
    monkeypatch.chdir(tmp_path)
    for name in [n for n in os.environ if n.startswith("CLPLAN_")]:
        monkeypatch.delenv(name)
    return CliRunner()


@pytest.fixture
def scenario_file(tmp_path, generated):
    path = tmp_path / "stopped_lead.json"
    path.write_bytes(save_scenario(generated(ScenarioKind.STOPPED_LEAD)))
    return path


def _is_svg(text: str) -> bool:
    return ET.fromstring(text).tag.endswith("svg")


def test_config_prints_effective_yaml(runner):
    result = runner.invoke(cli, ["--set", "postprocess.alpha=0.9", "config"])
    assert result.exit_code == 0, result.output
    assert yaml.safe_load(result.output)["postprocess"]["alpha"] == 0.9


def test_unknown_key_is_usage_error(runner):
    result = runner.invoke(cli, ["--set", "postprocess.alhpa=0.9", "config"])
    assert result.exit_code == ExitCode.USAGE_ERROR
    assert "postprocess.alhpa" in result.output


def test_gradcheck_passes(runner, tmp_path):
    result = runner.invoke(cli, ["gradcheck", "--out", str(tmp_path / "grad.json")])
    assert result.exit_code == 0, result.output
    assert json.loads((tmp_path / "grad.json").read_text())["passed"] is True


def test_gen_scenarios_writes_loadable_files(runner, tmp_path):
    out = tmp_path / "suite"
    result = runner.invoke(cli, ["gen-scenarios", "--kind", "red_light", "--count", "2", "--seed", "5", "--out", str(out)])
    assert result.exit_code == 0, result.output
    files = sorted(p.name for p in out.iterdir())
    assert files == ["red_light_0005.json", "red_light_0006.json"]
    assert load_scenario((out / files[0]).read_bytes()).metadata.seed == 5


def test_simulate_then_render(runner, tmp_path, scenario_file):
    out = tmp_path / "episode"
    result = runner.invoke(cli, [*SHORT, "simulate", str(scenario_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text())
    assert report["status"] == "ok"
    assert 0.0 <= report["report"]["aggregate"] <= 1.0

    frames = tmp_path / "frames"
    result = runner.invoke(cli, ["render", str(out / "simlog.json"), "--out", str(frames)])
    assert result.exit_code == 0, result.output
    assert sorted(p.name for p in frames.iterdir()) == ["tick_000.svg", "tick_010.svg"]
    assert _is_svg((frames / "tick_000.svg").read_text())


def test_render_scenario_with_costmap(runner, tmp_path, scenario_file):
    out = tmp_path / "picture"
    result = runner.invoke(cli, ["--set", "grid.height=50", "--set", "grid.width=60", "render", str(scenario_file), "--out", str(out), "--costmap"])
    assert result.exit_code == 0, result.output
    assert _is_svg((out / "scenario.svg").read_text())
    assert (out / "costmap.pgm").read_text().splitlines()[:3] == ["P2", "60 50", "255"]


def test_malformed_scenario_is_domain_error(runner, tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"av": 3}')
    result = runner.invoke(cli, ["simulate", str(path), "--out", str(tmp_path / "x")])
    assert result.exit_code == ExitCode.DOMAIN_ERROR
    assert "Error" in result.output


def test_augment_preview(runner, tmp_path, scenario_file):
    out = tmp_path / "aug"
    result = runner.invoke(cli, ["augment-preview", str(scenario_file), "--augmentor", "leading_dropout", "--out", str(out)])
    assert result.exit_code == 0, result.output
    echoed = json.loads(result.output.strip().splitlines()[-1])
    assert echoed["polarity"] == Polarity.NEGATIVE.value and echoed["gt_valid"] is False
    assert load_scenario((out / "augmented.json").read_bytes()).agents == []
    assert _is_svg((out / "after.svg").read_text())


def test_inapplicable_augmentor_is_domain_error(runner, tmp_path, scenario_file):
    result = runner.invoke(cli, ["augment-preview", str(scenario_file), "--augmentor", "traffic_light_inversion", "--out", str(tmp_path / "aug")])
    assert result.exit_code == ExitCode.DOMAIN_ERROR


def test_benchmark_over_nothing_is_usage_error(runner, tmp_path):
    result = runner.invoke(cli, ["benchmark", "--generate", "stopped_lead:0", "--out", str(tmp_path / "bench")])
    assert result.exit_code == ExitCode.USAGE_ERROR
    result = runner.invoke(cli, ["benchmark", "--out", str(tmp_path / "bench")])
    assert result.exit_code == ExitCode.USAGE_ERROR
    result = runner.invoke(cli, ["benchmark", "--generate", "merge:2", "--out", str(tmp_path / "bench")])
    assert result.exit_code == ExitCode.USAGE_ERROR


def test_benchmark_generated_suite(runner, tmp_path):
    out = tmp_path / "bench"
    result = runner.invoke(cli, [*SHORT, "benchmark", "--generate", "stopped_lead:2", "--out", str(out), "--timing"])
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "results.csv")
    assert table["scenario_id"].tolist() == ["stopped_lead_0000", "stopped_lead_0001"]
    assert (out / "timing.csv").exists()
    assert json.loads((out / "summary.json").read_text())["scenarios"] == 2


@pytest.mark.slow
def test_ablate_writes_table(runner, tmp_path):
    out = tmp_path / "ablate"
    args = [*SHORT, "ablate", "--generate", "stopped_lead:1", "--alpha", "0", "--alpha", "0.3", "--top-k", "10", "--out", str(out)]
    result = runner.invoke(cli, args)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(out / "ablation.csv")
    assert table["setting"].tolist() == ["no_postprocess", "alpha=0,k=10", "alpha=0.3,k=10"]
