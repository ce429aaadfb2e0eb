"""Rule-based proposal generator with the lateral x longitudinal output grid of a learned decoder.

Each reference line contributes ``n_lon`` proposals: the lateral path blends
the AV's offset into the line with a quintic, and the longitudinal profiles
are IDM rollouts toward evenly spaced stop points plus one free-flow profile.
Leaders in the path corridor and red signals on the line act as additional
IDM leaders for every profile.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import softmax

from clplan.control import VehicleParams
from clplan.lane_graph import ReferenceLine
from clplan.types import (
    COS,
    DT,
    FUTURE_STEPS,
    SIN,
    TRAJECTORY_CHANNELS,
    VX,
    VY,
    X,
    Y,
    Scenario,
    TrafficLightState,
)
from clplan.utils.geometry import normalize_angle, project_points

logger = logging.getLogger(__name__)

# Largest heading error the lateral blend starts from (rad).
_MAX_BLEND_SLOPE_ANGLE = 0.5


class IdmParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    a_max: float = Field(1.5, gt=0, description="Maximum acceleration (m/s^2) [decision]")
    b: float = Field(2.0, gt=0, description="Comfortable deceleration (m/s^2) [decision]")
    s0: float = Field(2.0, ge=0, description="Standstill gap (m) [decision]")
    time_headway: float = Field(1.5, ge=0, description="Desired time headway T (s) [decision]")
    b_max: float = Field(4.0, gt=0, description="Emergency deceleration (m/s^2) [decision]")
    delta: float = Field(4.0, gt=0, description="Free-road acceleration exponent [decision]")


class ProposerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_lon: int = Field(12, ge=2, description="Longitudinal proposals per reference line [method]")
    horizon: int = Field(FUTURE_STEPS, ge=2, description="Trajectory steps [method]")
    blend_length: float = Field(30.0, gt=0, description="Lateral blend distance cap (m) [decision]")
    temperature: float = Field(1.0, gt=0, description="Confidence softmax temperature [decision]")
    lateral_scale: float = Field(3.5, gt=0, description="Offset (m) costing one unit of confidence score [decision]")
    leader_margin: float = Field(0.3, ge=0, description="Extra lateral clearance for corridor leaders (m) [decision]")
    standstill_buffer: float = Field(
        0.5, ge=0, description="Extra distance kept behind leaders and red signals on top of s0 (m) [decision]"
    )


def idm_acceleration(v, v_des, gap, closing_speed, params: IdmParams):
    """Intelligent Driver Model acceleration; works elementwise on arrays.

    ``gap`` is the free distance to the leader (``inf`` on a free road) and
    ``closing_speed`` is ``v - v_leader``. A nonpositive gap returns
    ``-b_max``; results never go below ``-b_max``.
    """
    v = np.asarray(v, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    v_des = np.maximum(np.asarray(v_des, dtype=np.float64), 1e-3)
    s_star = params.s0 + np.maximum(
        0.0, v * params.time_headway + v * np.asarray(closing_speed) / (2.0 * np.sqrt(params.a_max * params.b))
    )
    safe_gap = np.where(gap > 0, gap, 1.0)
    interaction = np.where(np.isfinite(gap), (s_star / safe_gap) ** 2, 0.0)
    accel = params.a_max * (1.0 - (v / v_des) ** params.delta - interaction)
    accel = np.where(gap > 0, np.maximum(accel, -params.b_max), -params.b_max)
    return float(accel) if accel.ndim == 0 else accel


@dataclass(frozen=True)
class ProposalSet:
    """Proposal grid ``(lines, profiles, T, 6)``, flattened confidences, free head and agent predictions."""

    trajectories: npt.NDArray[np.float64]
    confidences: npt.NDArray[np.float64]
    free: npt.NDArray[np.float64]
    predictions: npt.NDArray[np.float64]
    reference_lines: tuple[ReferenceLine, ...] = field(default=())

    @property
    def flat(self) -> npt.NDArray[np.float64]:
        """Proposals as ``(lines * profiles, T, 6)`` in confidence order."""
        return self.trajectories.reshape(-1, *self.trajectories.shape[2:])

    def __len__(self) -> int:
        return int(self.trajectories.shape[0] * self.trajectories.shape[1])


def constant_velocity_trajectory(x: float, y: float, heading: float, vx: float, vy: float, horizon: int, dt: float = DT) -> npt.NDArray[np.float64]:
    t = (np.arange(horizon) + 1) * dt
    traj = np.zeros((horizon, TRAJECTORY_CHANNELS))
    traj[:, X] = x + vx * t
    traj[:, Y] = y + vy * t
    traj[:, COS] = np.cos(heading)
    traj[:, SIN] = np.sin(heading)
    traj[:, VX] = vx
    traj[:, VY] = vy
    return traj


def predict_agents(scenario: Scenario, horizon: int = FUTURE_STEPS, dt: float = DT) -> npt.NDArray[np.float64]:
    """Constant-velocity futures ``(N_A, horizon, 2)``; unobserved agents hold their last seen position."""
    out = np.zeros((len(scenario.agents), horizon, 2))
    t = (np.arange(horizon) + 1) * dt
    for i, agent in enumerate(scenario.agents):
        current = agent.current
        if current.valid:
            out[i] = current.pose.xy + np.outer(t, current.velocity)
            continue
        seen = [s for s in agent.history if s.valid]
        if seen:
            out[i] = seen[-1].pose.xy
    return out


def _quintic_blend(d0: float, slope0: float, length: float, s: npt.NDArray[np.float64]) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Lateral offset and its slope along ``s`` for a quintic from ``(d0, slope0)`` to zero at ``length``."""
    a0, a1 = d0, slope0 * length
    a3, a4, a5 = -10 * a0 - 6 * a1, 15 * a0 + 8 * a1, -6 * a0 - 3 * a1
    u = np.clip(s / length, 0.0, 1.0)
    d = a0 + a1 * u + a3 * u**3 + a4 * u**4 + a5 * u**5
    dd = (a1 + 3 * a3 * u**2 + 4 * a4 * u**3 + 5 * a5 * u**4) / length
    beyond = s >= length
    return np.where(beyond, 0.0, d), np.where(beyond, 0.0, dd)


@dataclass(frozen=True)
class _LineContext:
    ref: ReferenceLine
    s_av: float
    d_av: float
    slope: float
    blend: float
    limits: npt.NDArray[np.float64]
    offsets: npt.NDArray[np.float64]
    # Leaders as (s, speed along the line, half length); stop lines have zero length.
    leaders: npt.NDArray[np.float64]
    route_fraction: float


def _line_context(scenario: Scenario, ref: ReferenceLine, vehicle: VehicleParams, config: ProposerConfig) -> _LineContext:
    av = scenario.av_state
    proj = project_points(ref.points, av.pose.xy)
    s_av, d_av = float(proj.s[0]), float(proj.d[0])
    heading_ref = float(np.interp(s_av, ref.arclength, np.unwrap(ref.headings)))
    slope = float(np.tan(np.clip(normalize_angle(av.pose.heading - heading_ref), -_MAX_BLEND_SLOPE_ANGLE, _MAX_BLEND_SLOPE_ANGLE)))
    blend = min(config.blend_length, ref.length / 2.0)

    lanes = scenario.lanes_by_id
    offsets = np.asarray(ref.lane_offsets or (0.0,), dtype=np.float64)
    ids = ref.source_lane_ids or ()
    limits = np.asarray([lanes[i].speed_limit for i in ids] or [scenario.lanes[0].speed_limit], dtype=np.float64)

    leaders: list[tuple[float, float, float]] = []
    bodies = [(a.current.pose, a.current.velocity, a.box) for a in scenario.agents if a.current.valid]
    bodies += [(o.pose, (0.0, 0.0), o.box) for o in scenario.obstacles]
    if bodies:
        positions = np.array([[p.x, p.y] for p, _, _ in bodies])
        projections = project_points(ref.points, positions)
        path_d, _ = _quintic_blend(d_av, slope, blend, projections.s - s_av)
        for k, (pose, velocity, box) in enumerate(bodies):
            s_k = float(projections.s_raw[k])
            if s_k <= s_av or s_k > ref.length + box[0]:
                continue
            half_span = (vehicle.width + box[1]) / 2.0 + config.leader_margin
            if abs(projections.d[k] - path_d[k]) > half_span:
                continue
            idx = min(int(projections.segment[k]), len(ref.headings) - 1)
            tangent = np.array([np.cos(ref.headings[idx]), np.sin(ref.headings[idx])])
            along_speed = max(0.0, float(np.dot(velocity, tangent)))
            leaders.append((s_k, along_speed, box[0] / 2.0))

    for lane_id, offset in zip(ids, ref.lane_offsets):
        if lanes[lane_id].traffic_light == TrafficLightState.RED and offset > s_av:
            leaders.append((offset, 0.0, 0.0))

    route = set(scenario.route_lane_ids)
    in_route = sum(1 for i in ids if i in route)
    return _LineContext(
        ref=ref,
        s_av=s_av,
        d_av=d_av,
        slope=slope,
        blend=blend,
        limits=limits,
        offsets=offsets,
        leaders=np.asarray(leaders, dtype=np.float64).reshape(-1, 3),
        route_fraction=in_route / len(ids) if ids else 0.0,
    )


def _longitudinal_profiles(
    contexts: list[_LineContext],
    v0: float,
    n_lon: int,
    horizon: int,
    dt: float,
    vehicle: VehicleParams,
    idm: IdmParams,
    buffer: float = 0.0,
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """IDM rollouts for every (line, profile) row; returns ``(s, v, a)`` each ``(rows, horizon)``.

    Stop profiles never speed up again once they have started braking.
    """
    n_rows = len(contexts) * n_lon
    stop_s = np.empty(n_rows)
    for r, ctx in enumerate(contexts):
        stop_s[r * n_lon : r * n_lon + n_lon - 1] = (np.arange(n_lon - 1) + 1) * ctx.ref.length / (n_lon - 1)
        stop_s[r * n_lon + n_lon - 1] = np.inf
    stop_row = np.isfinite(stop_s)

    n_lead = max(max(len(ctx.leaders) for ctx in contexts), 1)
    lead = np.tile(np.array([np.inf, 0.0, 0.0]), (n_rows, n_lead, 1))
    n_lanes = max(len(ctx.offsets) for ctx in contexts)
    offsets = np.full((n_rows, n_lanes), np.inf)
    limits = np.zeros((n_rows, n_lanes))
    for r, ctx in enumerate(contexts):
        rows = slice(r * n_lon, (r + 1) * n_lon)
        lead[rows, : len(ctx.leaders)] = ctx.leaders
        offsets[rows, : len(ctx.offsets)] = ctx.offsets
        limits[rows, : len(ctx.limits)] = ctx.limits
    offsets[:, 0] = -np.inf
    row_index = np.arange(n_rows)
    half_av = vehicle.length / 2.0

    s = np.repeat([ctx.s_av for ctx in contexts], n_lon).astype(np.float64)
    v = np.full(n_rows, float(v0))
    braking = np.zeros(n_rows, dtype=bool)
    s_out, v_out, a_out = (np.empty((n_rows, horizon)) for _ in range(3))
    for k in range(horizon):
        lane = (s[:, None] >= offsets).sum(axis=1) - 1
        v_des = limits[row_index, lane]
        lead_s = lead[..., 0] + lead[..., 1] * (k * dt)
        gaps = np.concatenate([(stop_s - s)[:, None], lead_s - lead[..., 2] - half_av - buffer - s[:, None]], axis=1)
        closing = np.concatenate([v[:, None], v[:, None] - lead[..., 1]], axis=1)
        accel = idm_acceleration(v[:, None], v_des[:, None], gaps, closing, idm).min(axis=1)
        accel = np.clip(accel, -idm.b_max, idm.a_max)
        braking |= stop_row & (accel < 0.0)
        accel = np.where(braking, np.minimum(accel, 0.0), accel)
        a_out[:, k] = accel
        s = s + v * dt
        v = np.maximum(0.0, v + accel * dt)
        s_out[:, k] = s
        v_out[:, k] = v
    return s_out, v_out, a_out


def _trajectories_on_line(ctx: _LineContext, s: npt.NDArray[np.float64], v: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    n_rows, horizon = s.shape
    centers, ref_heading = ctx.ref.interpolate(s.ravel())
    d, slope = _quintic_blend(ctx.d_av, ctx.slope, ctx.blend, s.ravel() - ctx.s_av)
    normal = np.stack([-np.sin(ref_heading), np.cos(ref_heading)], axis=-1)
    heading = ref_heading + np.arctan(slope)
    speed = v.ravel()
    traj = np.empty((n_rows * horizon, TRAJECTORY_CHANNELS))
    traj[:, X : Y + 1] = centers + d[:, None] * normal
    traj[:, COS] = np.cos(heading)
    traj[:, SIN] = np.sin(heading)
    traj[:, VX] = speed * traj[:, COS]
    traj[:, VY] = speed * traj[:, SIN]
    return traj.reshape(n_rows, horizon, TRAJECTORY_CHANNELS)


def generate_proposals(
    scenario: Scenario,
    refs: list[ReferenceLine],
    n_lon: int = 12,
    config: ProposerConfig | None = None,
    idm: IdmParams | None = None,
    vehicle: VehicleParams | None = None,
    dt: float = DT,
) -> ProposalSet:
    """Proposal grid over ``refs`` with heuristic confidences.

    Confidence is a softmax of normalized progress (scaled by the share of
    route lanes the line covers) minus discomfort and lateral offset.
    """
    config = config or ProposerConfig()
    idm = idm or IdmParams()
    vehicle = vehicle or VehicleParams()
    horizon = config.horizon
    av = scenario.av_state
    free = constant_velocity_trajectory(av.pose.x, av.pose.y, av.pose.heading, *av.velocity, horizon=horizon, dt=dt)
    predictions = predict_agents(scenario, horizon, dt)

    if not refs:
        return ProposalSet(
            trajectories=np.zeros((0, n_lon, horizon, TRAJECTORY_CHANNELS)),
            confidences=np.zeros(0),
            free=free,
            predictions=predictions,
        )

    contexts = [_line_context(scenario, ref, vehicle, config) for ref in refs]
    s, v, a = _longitudinal_profiles(contexts, av.speed, n_lon, horizon, dt, vehicle, idm, config.standstill_buffer)

    grid = np.stack(
        [_trajectories_on_line(ctx, s[r * n_lon : (r + 1) * n_lon], v[r * n_lon : (r + 1) * n_lon]) for r, ctx in enumerate(contexts)]
    )

    top_speed = max(float(np.max(ctx.limits)) for ctx in contexts)
    reach = max(top_speed * horizon * dt, 1.0)
    progress = (s[:, -1] - np.repeat([ctx.s_av for ctx in contexts], n_lon)) / reach
    route = np.repeat([0.5 + 0.5 * ctx.route_fraction for ctx in contexts], n_lon)
    discomfort = np.abs(a).mean(axis=1) / idm.b_max
    offset = np.repeat([abs(ctx.d_av) / config.lateral_scale for ctx in contexts], n_lon)
    score = progress * route - discomfort - offset
    confidences = softmax(score / config.temperature)

    return ProposalSet(
        trajectories=grid,
        confidences=confidences,
        free=free,
        predictions=predictions,
        reference_lines=tuple(refs),
    )
