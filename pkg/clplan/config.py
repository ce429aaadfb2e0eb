"""Layered configuration.

Sources, lowest precedence first: built-in defaults, a YAML file, environment
variables ``CLPLAN_<SECTION>__<KEY>`` and ``section.key=value`` overrides from
the command line. Unknown keys anywhere are a :class:`ConfigError`.
"""

import logging
import os
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from clplan.augment import AugmentConfig
from clplan.control import TrackerParams, VehicleParams
from clplan.costmap import GridConfig
from clplan.lane_graph import LaneGraphConfig
from clplan.losses import CoveringCircleModel, LossConfig
from clplan.metrics import MetricsConfig
from clplan.postprocess import PostprocessConfig
from clplan.proposer import IdmParams, ProposerConfig
from clplan.simulator.benchmark import BenchmarkConfig
from clplan.simulator.episode import SimulatorConfig
from clplan.types import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "CLPLAN_"


class AppConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    grid: GridConfig = GridConfig()
    circles: CoveringCircleModel = CoveringCircleModel()
    loss: LossConfig = LossConfig()
    lane_graph: LaneGraphConfig = LaneGraphConfig()
    idm: IdmParams = IdmParams()
    proposer: ProposerConfig = ProposerConfig()
    vehicle: VehicleParams = VehicleParams()
    tracker: TrackerParams = TrackerParams()
    metrics: MetricsConfig = MetricsConfig()
    postprocess: PostprocessConfig = PostprocessConfig()
    augment: AugmentConfig = AugmentConfig()
    simulator: SimulatorConfig = SimulatorConfig()
    benchmark: BenchmarkConfig = BenchmarkConfig()


def _check_key(dotted: str, source: str) -> None:
    model: type[BaseModel] = AppConfig
    parts = dotted.split(".")
    for depth, part in enumerate(parts):
        if part not in model.model_fields:
            raise ConfigError(source, f"unknown key '{'.'.join(parts[: depth + 1])}'")
        annotation = model.model_fields[part].annotation
        nested = isinstance(annotation, type) and issubclass(annotation, BaseModel)
        if depth < len(parts) - 1 and not nested:
            raise ConfigError(source, f"'{'.'.join(parts[: depth + 1])}' has no sub-keys")
        if depth == len(parts) - 1 and nested:
            raise ConfigError(source, f"'{dotted}' is a section, set one of its keys")
        if nested:
            model = annotation


def _nested(dotted: str, value: Any) -> dict:
    for part in reversed(dotted.split(".")):
        value = {part: value}
    return value


def _merge(base: dict, override: Mapping) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def env_overrides(env: Mapping[str, str]) -> list[tuple[str, Any, str]]:
    """``(dotted key, value, variable name)`` for every prefixed variable, sorted by name."""
    found = []
    for name in sorted(env):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX) :].lower().replace("__", ".")
        found.append((dotted, yaml.safe_load(env[name]), name))
    return found


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(item, "expected KEY=VALUE")
    return key.strip(), yaml.safe_load(raw)


def _read_file(path: Path) -> dict:
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"invalid YAML: {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be a mapping of sections")
    return data


def load_config(
    path: Path | str | None = None,
    env: Mapping[str, str] | None = None,
    overrides: Iterable[str | tuple[str, Any]] = (),
) -> AppConfig:
    """Effective configuration; later layers win.

    ``env`` defaults to the process environment. ``overrides`` holds
    ``"section.key=value"`` strings or ``(dotted key, value)`` pairs.

    Raises:
        ConfigError: Unknown key, malformed override or invalid value; the
            error names the offending key.
    """
    data: dict = _read_file(Path(path)) if path is not None else {}
    env = os.environ if env is None else env
    for dotted, value, name in env_overrides(env):
        _check_key(dotted, name)
        data = _merge(data, _nested(dotted, value))
    for item in overrides:
        dotted, value = parse_override(item) if isinstance(item, str) else item
        _check_key(dotted, dotted)
        data = _merge(data, _nested(dotted, value))

    try:
        config = AppConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigError(".".join(str(part) for part in first["loc"]) or "<config>", first["msg"]) from e
    logger.debug(f"Loaded configuration (file={path}, {len(data)} sections set)")
    return config


def dump_config(config: AppConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
