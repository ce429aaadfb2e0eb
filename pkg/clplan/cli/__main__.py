import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import click
import numpy as np
from dotenv import load_dotenv

from clplan.augment import AUGMENTORS, apply_augmentor
from clplan.config import AppConfig, dump_config, load_config
from clplan.costmap import scenario_esdf, to_pgm
from clplan.gradcheck import run_gradcheck
from clplan.planner import build_planner
from clplan.render import render_log, scenario_svg
from clplan.scene import load_scenario, save_scenario
from clplan.simulator import (
    evaluate_log,
    generate_suite,
    load_simlog,
    run_ablation,
    run_benchmark,
    run_episode,
    save_simlog,
)
from clplan.types import AgentPolicy, ConfigError, ExitCode, PlanningError, Scenario, ScenarioKind

logger = logging.getLogger(__name__)

T = TypeVar("T")

_POLICIES = click.Choice([p.value for p in AgentPolicy])
_OUT_DIR = click.Path(file_okay=False, path_type=Path)
_IN_FILE = click.Path(exists=True, dir_okay=False, path_type=Path)


def _run(action: Callable[[], T]) -> T:
    """Run a command body, mapping library errors onto the exit-code contract."""
    try:
        return action()
    except ConfigError as e:
        click.echo(f"Error: configuration: {e}", err=True)
        sys.exit(int(ExitCode.USAGE_ERROR))
    except PlanningError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(int(ExitCode.DOMAIN_ERROR))
    except OSError as e:
        click.echo(f"Error: {e.filename or ''}: {e.strerror or e}", err=True)
        sys.exit(int(ExitCode.DOMAIN_ERROR))


def _config(ctx: click.Context, **flags: Any) -> AppConfig:
    """Layered configuration; per-command flags (dotted key -> value) win over ``--set``."""
    overrides: list[str | tuple[str, Any]] = list(ctx.obj["overrides"])
    overrides += [(key.replace("__", "."), value) for key, value in flags.items() if value is not None]
    return load_config(ctx.obj["config_path"], overrides=overrides)


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)
    logger.info(f"Wrote {path}")


def _dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _parse_generate(spec: str) -> tuple[list[ScenarioKind], int]:
    kind, sep, count = spec.partition(":")
    if not sep or not count.isdigit():
        raise click.BadParameter(f"expected KIND:COUNT, got {spec!r}", param_hint="--generate")
    if kind == "all":
        return list(ScenarioKind), int(count)
    try:
        return [ScenarioKind(kind)], int(count)
    except ValueError:
        raise click.BadParameter(f"unknown scenario kind {kind!r}", param_hint="--generate") from None


def _collect_scenarios(config: AppConfig, scenarios_dir: Path | None, generate: tuple[str, ...]) -> list[Scenario]:
    if (scenarios_dir is None) == (not generate):
        raise click.UsageError("give exactly one of --scenarios or --generate")
    if scenarios_dir is not None:
        files = sorted(scenarios_dir.glob("*.json"))
        scenarios = [load_scenario(f.read_bytes()) for f in files]
    else:
        scenarios = []
        for spec in generate:
            kinds, count = _parse_generate(spec)
            if count > 0:
                scenarios += generate_suite(kinds, count, config.benchmark.seed, idm=config.idm)
    if not scenarios:
        raise click.UsageError("no scenarios to run")
    logger.info(f"Collected {len(scenarios)} scenarios")
    return scenarios


@click.group()
@click.option("--config", "config_path", type=_IN_FILE, default=None, help="YAML configuration file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one configuration key.")
@click.option(
    "--log-level",
    default="INFO",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
)
@click.pass_context
def cli(ctx: click.Context, config_path: Path | None, overrides: tuple[str, ...], log_level: str):
    """Closed-loop planning toolkit and desk-scale benchmark."""
    load_dotenv(override=False)
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config_path": config_path, "overrides": overrides}


@cli.command()
@click.argument("scenario_path", type=_IN_FILE)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--policy", type=_POLICIES, default=None)
@click.pass_context
def simulate(ctx: click.Context, scenario_path: Path, out_dir: Path, seed: int, policy: str | None):
    """Run one closed-loop episode; writes simlog.json and report.json."""

    def body() -> bool:
        config = _config(ctx, simulator__policy=policy)
        scenario = load_scenario(scenario_path.read_bytes())
        planner = build_planner(config.benchmark.planner, config)
        log = run_episode(
            scenario,
            planner,
            policy=config.simulator.policy,
            seed=seed,
            config=config.simulator,
            idm=config.idm,
            vehicle=config.vehicle,
            tracker=config.tracker,
            metrics=config.metrics,
        )
        report, collisions = evaluate_log(log, scenario, config.metrics)
        _write(out_dir / "simlog.json", save_simlog(log))
        summary = {
            "scenario_id": scenario.metadata.id,
            "status": "failed" if log.failed else "ok",
            "failure": log.failure,
            "report": report.model_dump(),
            "collisions": [c.model_dump() for c in collisions],
            "emergency_stops": log.emergency_stops,
        }
        _write(out_dir / "report.json", _dump_json(summary))
        click.echo(f"{scenario.metadata.id}: {summary['status']}, score {report.aggregate:.4f}")
        if log.failed:
            click.echo(f"Error: {log.failure}", err=True)
        return log.failed

    if _run(body):
        sys.exit(int(ExitCode.DOMAIN_ERROR))


@cli.command()
@click.option("--scenarios", "scenarios_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--generate", multiple=True, metavar="KIND:COUNT", help="Generated suite, KIND may be 'all'.")
@click.option("--out", "out_dir", type=_OUT_DIR, required=True)
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--policy", type=_POLICIES, default=None)
@click.option("--timing", is_flag=True, help="Also write per-scenario runtimes to timing.csv.")
@click.pass_context
def benchmark(ctx, scenarios_dir, generate, out_dir, workers, seed, policy, timing):
    """Run and score a scenario set; writes results.csv and summary.json."""

    def body() -> None:
        config = _config(ctx, benchmark__workers=workers, benchmark__seed=seed, simulator__policy=policy)
        scenarios = _collect_scenarios(config, scenarios_dir, generate)
        result = run_benchmark(scenarios, config)
        result.write(out_dir, timing=timing)
        summary = result.summary()
        click.echo(
            f"{summary['scenarios']} scenarios, mean score {summary['mean_score']}, "
            f"{summary['failed_init']} failed at init, {summary['failed']} failed"
        )

    _run(body)


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_file", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.pass_context
def gradcheck(ctx: click.Context, seed: int, out_file: Path | None):
    """Finite-difference checks of every analytic gradient; exits 1 when any check fails."""

    def body() -> bool:
        config = _config(ctx)
        report = run_gradcheck(seed, config.circles, config.loss.sigma)
        text = report.model_dump_json(indent=2) + "\n"
        if out_file is None:
            click.echo(text, nl=False)
        else:
            _write(out_file, text)
        return report.passed

    if not _run(body):
        sys.exit(int(ExitCode.DOMAIN_ERROR))


@cli.command("augment-preview")
@click.argument("scenario_path", type=_IN_FILE)
@click.option("--augmentor", type=click.Choice(sorted(AUGMENTORS)), required=True)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def augment_preview(ctx: click.Context, scenario_path: Path, augmentor: str, out_dir: Path, seed: int):
    """Apply one augmentor; writes augmented.json plus before/after SVGs."""

    def body() -> None:
        config = _config(ctx)
        scenario = load_scenario(scenario_path.read_bytes())
        sample = apply_augmentor(augmentor, scenario, np.random.default_rng(seed), config.augment)
        _write(out_dir / "augmented.json", save_scenario(sample.scenario))
        _write(out_dir / "before.svg", scenario_svg(scenario))
        _write(out_dir / "after.svg", scenario_svg(sample.scenario))
        click.echo(
            json.dumps(
                {"augmentor": sample.augmentor, "polarity": sample.polarity.value, "gt_valid": sample.gt_valid, "seed": sample.seed},
                sort_keys=True,
            )
        )

    _run(body)


@cli.command("gen-scenarios")
@click.option("--kind", type=click.Choice(["all", *(k.value for k in ScenarioKind)]), required=True)
@click.option("--count", type=click.IntRange(min=1), required=True)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def gen_scenarios(ctx: click.Context, kind: str, count: int, out_dir: Path, seed: int):
    """Write generated scenarios as <kind>_<seed>.json."""

    def body() -> None:
        config = _config(ctx)
        kinds = list(ScenarioKind) if kind == "all" else [ScenarioKind(kind)]
        for scenario in generate_suite(kinds, count, seed, idm=config.idm):
            _write(out_dir / f"{scenario.metadata.id}.json", save_scenario(scenario))
        click.echo(f"{len(kinds) * count} scenarios written to {out_dir}")

    _run(body)


@cli.command()
@click.argument("input_path", type=_IN_FILE)
@click.option("--out", "out_dir", type=_OUT_DIR, required=True)
@click.option("--every", type=click.IntRange(min=1), default=None, help="Render every N ticks of a log.")
@click.option("--costmap", is_flag=True, help="Also write the drivable-area ESDF as costmap.pgm.")
@click.pass_context
def render(ctx: click.Context, input_path: Path, out_dir: Path, every: int | None, costmap: bool):
    """Render a simulation log or a scenario to SVG."""

    def body() -> None:
        config = _config(ctx)
        text = input_path.read_text()
        try:
            document = json.loads(text)
        except json.JSONDecodeError:
            document = None
        if isinstance(document, dict) and "cycles" in document:
            log = load_simlog(text)
            scenario = log.scenario.to_scenario()
            for name, svg in render_log(log, every).items():
                _write(out_dir / name, svg)
        else:
            scenario = load_scenario(text)
            _write(out_dir / "scenario.svg", scenario_svg(scenario))
        if costmap:
            _write(out_dir / "costmap.pgm", to_pgm(scenario_esdf(scenario, config.grid)))

    _run(body)


@cli.command()
@click.option("--scenarios", "scenarios_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--generate", multiple=True, metavar="KIND:COUNT")
@click.option("--out", "out_dir", type=_OUT_DIR, required=True)
@click.option("--alpha", "alphas", type=float, multiple=True, help="Fusion weight; repeatable.")
@click.option("--top-k", "top_ks", type=click.IntRange(min=1), multiple=True, help="Candidate count; repeatable.")
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--policy", type=_POLICIES, default=None)
@click.pass_context
def ablate(ctx, scenarios_dir, generate, out_dir, alphas, top_ks, workers, policy):
    """Mean score per (alpha, K) setting plus the planner without post-processing."""

    def body() -> None:
        config = _config(ctx, benchmark__workers=workers, simulator__policy=policy)
        scenarios = _collect_scenarios(config, scenarios_dir, generate)
        table = run_ablation(scenarios, config, list(alphas) or None, list(top_ks) or None)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_dir / "ablation.csv", index=False, float_format="%.6f", lineterminator="\n")
        logger.info(f"Wrote {out_dir / 'ablation.csv'}")
        click.echo(table.to_string(index=False))

    _run(body)


@cli.command("config")
@click.pass_context
def show_config(ctx: click.Context):
    """Print the effective configuration as YAML."""
    click.echo(_run(lambda: dump_config(_config(ctx))), nl=False)


def main() -> None:
    cli(prog_name="clplan")


if __name__ == "__main__":
    main()
