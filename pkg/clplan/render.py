"""SVG snapshots of scenarios and simulation logs.

Route lanes are shaded, reference lines dashed purple, proposals gray and the
selected trajectory highlighted. Output is byte-reproducible: fixed hash
salt, text kept as text, no date metadata.
"""

import io
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import patches  # noqa: E402

from clplan.lane_graph import find_reference_lines  # noqa: E402
from clplan.simulator.episode import CycleRecord, SimLog  # noqa: E402
from clplan.types import Scenario, TrafficLightState  # noqa: E402
from clplan.utils.geometry import box_corners  # noqa: E402

logger = logging.getLogger(__name__)

_SVG_RC = {"svg.hashsalt": "clplan", "svg.fonttype": "none", "path.simplify": False}
_WINDOW = 60.0
_LIGHT_COLORS = {
    TrafficLightState.RED: "tab:red",
    TrafficLightState.YELLOW: "gold",
    TrafficLightState.GREEN: "tab:green",
}


def _to_svg(fig) -> str:
    buffer = io.StringIO()
    fig.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buffer.getvalue()


def _new_axes(center: np.ndarray, title: str):
    fig, ax = plt.subplots(figsize=(8, 8))
    ax.set_aspect("equal")
    ax.set_xlim(center[0] - _WINDOW, center[0] + _WINDOW)
    ax.set_ylim(center[1] - _WINDOW, center[1] + _WINDOW)
    ax.set_title(title, fontsize=10)
    return fig, ax


def _draw_map(ax, scenario: Scenario) -> None:
    route = set(scenario.route_lane_ids)
    for lane in scenario.lanes:
        outline = np.vstack([lane.left_boundary, lane.right_boundary[::-1]])
        color = "lightsteelblue" if lane.id in route else "whitesmoke"
        ax.add_patch(patches.Polygon(outline, closed=True, facecolor=color, edgecolor="silver", linewidth=0.5))
        center = lane.centerline_array
        ax.plot(center[:, 0], center[:, 1], color="darkgray", linewidth=0.4)
        if lane.traffic_light in _LIGHT_COLORS:
            ax.plot(*center[0], marker="s", markersize=5, color=_LIGHT_COLORS[lane.traffic_light])
    for obstacle in scenario.obstacles:
        _draw_box(ax, obstacle.pose.x, obstacle.pose.y, obstacle.pose.heading, obstacle.box, "dimgray")


def _draw_box(ax, x: float, y: float, heading: float, box: tuple[float, float], color: str, label: str | None = None) -> None:
    corners = box_corners(x, y, heading, *box)
    ax.add_patch(patches.Polygon(corners, closed=True, facecolor=color, edgecolor="black", linewidth=0.5, alpha=0.9))
    if label:
        ax.text(x, y, label, fontsize=6, ha="center", va="center")


def _draw_reference_lines(ax, lines: list[np.ndarray]) -> None:
    for k, points in enumerate(lines):
        ax.plot(points[:, 0], points[:, 1], linestyle="--", color="purple", linewidth=1.0, label="reference line" if k == 0 else None)


def render_scenario(scenario: Scenario) -> str:
    """The scenario at its current frame with reference lines and logged futures."""
    av = scenario.av_state
    fig, ax = _new_axes(av.pose.xy, scenario.metadata.id)
    _draw_map(ax, scenario)
    _draw_reference_lines(ax, [line.points for line in find_reference_lines(scenario)])
    for agent in scenario.agents:
        state = agent.current
        if not state.valid:
            continue
        _draw_box(ax, state.pose.x, state.pose.y, state.pose.heading, agent.box, "tab:orange", agent.id)
        if agent.future_gt is not None:
            future = np.asarray(agent.future_gt)
            ax.plot(future[:, 0], future[:, 1], linestyle=":", color="tab:orange", linewidth=0.8)
    if scenario.av.future_gt is not None:
        future = np.asarray(scenario.av.future_gt)
        ax.plot(future[:, 0], future[:, 1], linestyle=":", color="tab:blue", linewidth=1.0, label="logged future")
    _draw_box(ax, av.pose.x, av.pose.y, av.pose.heading, av.box, "tab:blue", "AV")
    ax.legend(loc="upper right", fontsize=7)
    return _to_svg(fig)


def render_tick(log: SimLog, tick: int, scenario: Scenario | None = None) -> str:
    """Closed-loop state at ``tick`` with the planning cycle recorded there, if any."""
    scenario = scenario or log.scenario.to_scenario()
    tick = min(max(tick, 0), log.n_ticks)
    frame = log.av[tick]
    fig, ax = _new_axes(np.array([frame.x, frame.y]), f"{scenario.metadata.id} tick {tick}")
    _draw_map(ax, scenario)

    cycle: CycleRecord | None = next((c for c in log.cycles if c.tick == tick), None)
    if cycle is not None:
        for k, proposal in enumerate(cycle.proposals or []):
            points = np.asarray(proposal)
            ax.plot(points[:, 0], points[:, 1], color="gray", linewidth=0.5, alpha=0.6, label="proposals" if k == 0 else None)
        _draw_reference_lines(ax, [np.asarray(line) for line in cycle.reference_lines or []])
        selected = np.asarray(cycle.selected)
        ax.plot(selected[:, 0], selected[:, 1], color="crimson", linewidth=2.0, label="selected")

    driven = np.array([[f.x, f.y] for f in log.av[: tick + 1]])
    ax.plot(driven[:, 0], driven[:, 1], color="tab:blue", linewidth=1.0, alpha=0.7)
    for agent in log.agents:
        if agent.valid[tick]:
            _draw_box(ax, agent.x[tick], agent.y[tick], agent.heading[tick], agent.box, "tab:orange", agent.id)
    _draw_box(ax, frame.x, frame.y, frame.heading, scenario.av.box, "tab:blue", "AV")
    for event in log.events:
        if event.tick == tick and event.kind != "planner_failure":
            ax.text(frame.x, frame.y + 4.0, event.kind, fontsize=7, color="crimson", ha="center")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc="upper right", fontsize=7)
    return _to_svg(fig)


def snapshot_ticks(log: SimLog, every: int | None = None) -> list[int]:
    """Ticks to render: every ``every`` ticks, or the ticks with stored proposals."""
    if every:
        return list(range(0, log.n_ticks + 1, every))
    ticks = [c.tick for c in log.cycles if c.proposals is not None]
    return ticks or [0, log.n_ticks]


def render_log(log: SimLog, every: int | None = None) -> dict[str, str]:
    """``tick_NNN.svg`` name to SVG text."""
    with plt.rc_context(_SVG_RC):
        scenario = log.scenario.to_scenario()
        return {f"tick_{tick:03d}.svg": render_tick(log, tick, scenario) for tick in snapshot_ticks(log, every)}


def scenario_svg(scenario: Scenario) -> str:
    with plt.rc_context(_SVG_RC):
        return render_scenario(scenario)
