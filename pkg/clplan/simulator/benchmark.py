"""Benchmark runner: many episodes, one results table.

Episodes run independently, optionally across worker processes; results are
collected in scenario order so the table never depends on the worker count.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
import pandas as pd
import shapely
from pydantic import BaseModel, ConfigDict, Field

from clplan.metrics import MapContext, MetricReport
from clplan.planner import build_planner
from clplan.simulator.episode import evaluate_log, run_episode
from clplan.types import AgentPolicy, InputError, Scenario, ScenarioKind
from clplan.utils.geometry import box_corners, boxes_overlap

if TYPE_CHECKING:
    from clplan.config import AppConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "no_at_fault_collision",
    "ttc_within_bound",
    "drivable_compliance",
    "driving_direction",
    "comfort",
    "progress",
    "speed_compliance",
]
RESULT_COLUMNS = ["scenario_id", "kind", "seed", "status", "score", *METRIC_COLUMNS, "emergency_stops"]


class BenchmarkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    planner: str = Field("rule_selection", description="Planner under test [decision]")
    workers: int = Field(1, ge=1, description="Parallel episode processes [decision]")
    seed: int = Field(0, description="First seed for generated suites [decision]")
    count_per_kind: int = Field(20, ge=1, description="Generated scenarios per kind [decision]")
    kinds: list[ScenarioKind] = Field(default_factory=lambda: list(ScenarioKind), description="Generated kinds [decision]")
    ablation_alphas: list[float] = Field([0.0, 0.1, 0.3, 0.9], description="Fusion weights swept by ablate [method]")
    ablation_top_ks: list[int] = Field([10, 20, 40], description="Candidate counts swept by ablate [decision]")


class ScenarioResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario_id: str
    kind: str | None = None
    seed: int | None = None
    status: Literal["ok", "failed", "failed_init"]
    report: MetricReport | None = None
    emergency_stops: int = 0
    failure: str | None = None
    runtime: float = 0.0

    @property
    def score(self) -> float | None:
        if self.status == "failed_init":
            return None
        return self.report.aggregate if self.report is not None else 0.0


class BenchmarkResult(BaseModel):
    """Per-scenario results; the mean skips scenarios that failed at initialization."""

    model_config = ConfigDict(frozen=True)

    results: list[ScenarioResult]

    @property
    def n_failed_init(self) -> int:
        return sum(1 for r in self.results if r.status == "failed_init")

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if r.status == "failed")

    @property
    def mean_score(self) -> float | None:
        scores = [r.score for r in self.results if r.score is not None]
        return float(np.mean(scores)) if scores else None

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.results:
            metrics = r.report.model_dump() if r.report is not None else {}
            rows.append(
                {
                    "scenario_id": r.scenario_id,
                    "kind": r.kind,
                    "seed": r.seed,
                    "status": r.status,
                    "score": r.score,
                    **{name: metrics.get(name) for name in METRIC_COLUMNS},
                    "emergency_stops": r.emergency_stops,
                }
            )
        return pd.DataFrame(rows, columns=RESULT_COLUMNS)

    def summary(self) -> dict:
        return {
            "scenarios": len(self.results),
            "scored": len(self.results) - self.n_failed_init,
            "failed_init": self.n_failed_init,
            "failed": self.n_failed,
            "mean_score": None if self.mean_score is None else round(self.mean_score, 6),
            "emergency_stops": sum(r.emergency_stops for r in self.results),
        }

    def write(self, out_dir: Path, timing: bool = False) -> list[Path]:
        """``results.csv`` and ``summary.json``, plus ``timing.csv`` on request."""
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "results.csv", out_dir / "summary.json"]
        self.to_frame().to_csv(paths[0], index=False, float_format="%.6f", lineterminator="\n")
        paths[1].write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if timing:
            paths.append(out_dir / "timing.csv")
            frame = pd.DataFrame({"scenario_id": [r.scenario_id for r in self.results], "seconds": [r.runtime for r in self.results]})
            frame.to_csv(paths[-1], index=False, float_format="%.3f", lineterminator="\n")
        return paths


def check_initial_state(scenario: Scenario, map_ctx: MapContext) -> str | None:
    """Reason the scenario cannot start, or ``None``."""
    av = scenario.av_state
    if not av.valid:
        return "AV current frame is unobserved"
    corners = box_corners(av.pose.x, av.pose.y, av.pose.heading, *av.box)
    if not shapely.contains_xy(map_ctx.drivable_tolerant, corners[:, 0], corners[:, 1]).all():
        return "AV starts outside the drivable area"
    others = [(a.id, a.current.pose, a.box) for a in scenario.agents if a.current.valid]
    others += [(o.id, o.pose, o.box) for o in scenario.obstacles]
    for object_id, pose, box in others:
        if boxes_overlap(corners, box_corners(pose.x, pose.y, pose.heading, *box)):
            return f"AV starts overlapping {object_id}"
    return None


def _run_one(scenario: Scenario, config: "AppConfig", policy: AgentPolicy) -> ScenarioResult:
    started = time.perf_counter()
    meta = scenario.metadata
    base = dict(scenario_id=meta.id, kind=meta.kind, seed=meta.seed)
    map_ctx = MapContext.from_scenario(scenario, config.metrics)
    reason = check_initial_state(scenario, map_ctx)
    if reason is not None:
        logger.warning(f"{meta.id}: failed at initialization: {reason}")
        return ScenarioResult(**base, status="failed_init", failure=reason)

    planner = build_planner(config.benchmark.planner, config)
    sim_config = config.simulator.model_copy(update={"record_diagnostics": False, "snapshot_every": 0})
    log = run_episode(
        scenario,
        planner,
        policy=policy,
        seed=meta.seed or 0,
        config=sim_config,
        idm=config.idm,
        vehicle=config.vehicle,
        tracker=config.tracker,
        metrics=config.metrics,
    )
    report, _ = evaluate_log(log, scenario, config.metrics)
    runtime = time.perf_counter() - started
    status = "failed" if log.failed else "ok"
    logger.info(f"{meta.id}: {status}, score {report.aggregate:.4f} ({runtime:.1f}s)")
    return ScenarioResult(
        **base,
        status=status,
        report=None if log.failed else report,
        emergency_stops=log.emergency_stops,
        failure=log.failure,
        runtime=runtime,
    )


def run_benchmark(
    scenarios: list[Scenario],
    config: "AppConfig",
    policy: AgentPolicy | str | None = None,
    workers: int | None = None,
) -> BenchmarkResult:
    """Run and score every scenario; results come back in input order."""
    if not scenarios:
        raise InputError("no scenarios to benchmark")
    policy = AgentPolicy(policy or config.simulator.policy)
    workers = workers or config.benchmark.workers
    logger.info(f"Benchmarking {len(scenarios)} scenarios with {config.benchmark.planner} ({policy.value}, {workers} workers)")
    if workers == 1:
        results = [_run_one(s, config, policy) for s in scenarios]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, scenarios, [config] * len(scenarios), [policy] * len(scenarios)))
    return BenchmarkResult(results=results)


class AblationRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    setting: str
    postprocess: bool
    alpha: float | None
    top_k: int | None
    mean_score: float | None
    failed_init: int
    emergency_stops: int


def run_ablation(
    scenarios: list[Scenario],
    config: "AppConfig",
    alphas: list[float] | None = None,
    top_ks: list[int] | None = None,
    policy: AgentPolicy | str | None = None,
    workers: int | None = None,
) -> pd.DataFrame:
    """Mean score for every (alpha, K) pair plus the confidence-only planner."""
    alphas = config.benchmark.ablation_alphas if alphas is None else alphas
    top_ks = config.benchmark.ablation_top_ks if top_ks is None else top_ks
    settings = [(False, None, None)] + [(True, a, k) for a in alphas for k in top_ks]
    rows = []
    for enabled, alpha, top_k in settings:
        update = {"enabled": enabled}
        if enabled:
            update.update(alpha=alpha, top_k=top_k)
        variant = config.model_copy(update={"postprocess": config.postprocess.model_copy(update=update)})
        result = run_benchmark(scenarios, variant, policy, workers)
        setting = "no_postprocess" if not enabled else f"alpha={alpha:g},k={top_k}"
        logger.info(f"Ablation {setting}: mean score {result.mean_score}")
        rows.append(
            AblationRow(
                setting=setting,
                postprocess=enabled,
                alpha=alpha,
                top_k=top_k,
                mean_score=result.mean_score,
                failed_init=result.n_failed_init,
                emergency_stops=sum(r.emergency_stops for r in result.results),
            ).model_dump()
        )
    return pd.DataFrame(rows, columns=list(AblationRow.model_fields))
