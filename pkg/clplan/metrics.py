"""Closed-loop driving metrics and their aggregation into a scenario score.

Metric kernels take an :class:`EgoTrace` whose arrays may carry a leading
batch axis, so the post-processor can score every rollout of a planning cycle
in one pass. Unbatched traces give plain scalars.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import shapely
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import savgol_filter

from clplan.lane_graph import lane_polygon, route_centerline
from clplan.types import DT, Lane, Scenario
from clplan.utils.geometry import box_corners, boxes_overlap, drop_repeated_points, project_points

logger = logging.getLogger(__name__)

_SAVGOL_WINDOW = 5
_SAVGOL_ORDER = 2
_TTC_REFINE_TOL = 1e-3


class ComfortBounds(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    min_lon_accel: float = Field(-4.05, description="(m/s^2) [decision]")
    max_lon_accel: float = Field(2.40, description="(m/s^2) [decision]")
    max_abs_lat_accel: float = Field(4.89, description="(m/s^2) [decision]")
    max_abs_jerk: float = Field(8.37, description="(m/s^3) [decision]")
    max_abs_lon_jerk: float = Field(4.13, description="(m/s^3) [decision]")
    max_abs_yaw_rate: float = Field(0.95, description="(rad/s) [decision]")
    max_abs_yaw_accel: float = Field(1.93, description="(rad/s^2) [decision]")


class ScoreWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    ttc: float = Field(5.0, ge=0, description="[decision]")
    progress: float = Field(5.0, ge=0, description="[decision]")
    speed: float = Field(4.0, ge=0, description="[decision]")
    comfort: float = Field(2.0, ge=0, description="[decision]")


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stopped_speed: float = Field(0.05, ge=0, description="AV counts as stationary below this speed (m/s) [decision]")
    ttc_horizon: float = Field(3.0, gt=0, description="Constant-velocity projection window (s) [decision]")
    ttc_step: float = Field(0.1, gt=0, description="Projection step (s) [decision]")
    ttc_threshold: float = Field(0.95, ge=0, description="Minimum acceptable time to collision (s) [decision]")
    drivable_tolerance: float = Field(0.3, ge=0, description="Footprint slack outside the drivable area (m) [decision]")
    direction_window: float = Field(1.0, gt=0, description="Wrong-way distance window (s) [decision]")
    direction_compliant: float = Field(2.0, ge=0, description="Wrong-way distance for full compliance (m) [decision]")
    direction_violation: float = Field(6.0, ge=0, description="Wrong-way distance scored zero (m) [decision]")
    comfort: ComfortBounds = ComfortBounds()
    max_overspeed: float = Field(2.23, gt=0, description="Mean overspeed that zeroes speed compliance (m/s) [decision]")
    stationary_expert: float = Field(0.1, ge=0, description="Expert progress below which progress scores 1 (m) [decision]")
    weights: ScoreWeights = ScoreWeights()


class MetricReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    no_at_fault_collision: float
    ttc_within_bound: float
    drivable_compliance: float
    driving_direction: float
    comfort: float
    progress: float
    speed_compliance: float
    aggregate: float


class CollisionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int
    object_id: str
    at_fault: bool
    reason: str


@dataclass(frozen=True)
class EgoTrace:
    """AV states sampled every ``dt``; arrays are ``(..., T)`` / ``(..., T, 2)``."""

    xy: npt.NDArray[np.float64]
    heading: npt.NDArray[np.float64]
    speed: npt.NDArray[np.float64]
    length: float
    width: float
    dt: float = DT

    @property
    def batched(self) -> bool:
        return self.xy.ndim == 3

    def as_batch(self) -> "EgoTrace":
        if self.batched:
            return self
        return EgoTrace(self.xy[None], self.heading[None], self.speed[None], self.length, self.width, self.dt)

    @property
    def velocity(self) -> npt.NDArray[np.float64]:
        return self.speed[..., None] * np.stack([np.cos(self.heading), np.sin(self.heading)], axis=-1)

    def corners(self) -> npt.NDArray[np.float64]:
        return box_corners(self.xy[..., 0], self.xy[..., 1], self.heading, self.length, self.width)


@dataclass(frozen=True)
class ObjectTrace:
    """Other road users over the same ticks; ``virtual`` marks stop boxes for red signals."""

    ids: tuple[str, ...]
    xy: npt.NDArray[np.float64]
    heading: npt.NDArray[np.float64]
    velocity: npt.NDArray[np.float64]
    length: npt.NDArray[np.float64]
    width: npt.NDArray[np.float64]
    valid: npt.NDArray[np.bool_]
    virtual: npt.NDArray[np.bool_] = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @classmethod
    def empty(cls, n_ticks: int) -> "ObjectTrace":
        return cls(
            ids=(),
            xy=np.zeros((0, n_ticks, 2)),
            heading=np.zeros((0, n_ticks)),
            velocity=np.zeros((0, n_ticks, 2)),
            length=np.zeros(0),
            width=np.zeros(0),
            valid=np.zeros((0, n_ticks), dtype=bool),
            virtual=np.zeros(0, dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def corners(self) -> npt.NDArray[np.float64]:
        return box_corners(
            self.xy[..., 0], self.xy[..., 1], self.heading, self.length[:, None], self.width[:, None]
        )

    def concat(self, other: "ObjectTrace") -> "ObjectTrace":
        virtual = self.virtual if len(self.virtual) == len(self) else np.zeros(len(self), dtype=bool)
        other_virtual = other.virtual if len(other.virtual) == len(other) else np.zeros(len(other), dtype=bool)
        return ObjectTrace(
            ids=self.ids + other.ids,
            xy=np.concatenate([self.xy, other.xy]),
            heading=np.concatenate([self.heading, other.heading]),
            velocity=np.concatenate([self.velocity, other.velocity]),
            length=np.concatenate([self.length, other.length]),
            width=np.concatenate([self.width, other.width]),
            valid=np.concatenate([self.valid, other.valid]),
            virtual=np.concatenate([virtual, other_virtual]),
        )


@dataclass(frozen=True)
class MapContext:
    """Per-scenario map geometry shared by every metric evaluation."""

    lanes: tuple[Lane, ...]
    polygons: tuple[shapely.Polygon, ...]
    drivable: shapely.Geometry
    drivable_tolerant: shapely.Geometry
    route: npt.NDArray[np.float64] | None

    @classmethod
    def from_scenario(cls, scenario: Scenario, config: MetricsConfig | None = None) -> "MapContext":
        config = config or MetricsConfig()
        polygons = tuple(lane_polygon(lane) for lane in scenario.lanes)
        drivable = shapely.unary_union(polygons) if polygons else shapely.Polygon()
        tolerant = drivable.buffer(config.drivable_tolerance) if polygons else shapely.Polygon()
        for geometry in (*polygons, drivable, tolerant):
            shapely.prepare(geometry)
        return cls(
            lanes=tuple(scenario.lanes),
            polygons=polygons,
            drivable=drivable,
            drivable_tolerant=tolerant,
            route=route_centerline(scenario),
        )

    def lane_membership(self, points: npt.NDArray[np.float64]) -> npt.NDArray[np.bool_]:
        """``(n_lanes, N)`` mask of points inside each lane polygon."""
        if not self.polygons:
            return np.zeros((0, len(points)), dtype=bool)
        return np.stack([shapely.contains_xy(p, points[:, 0], points[:, 1]) for p in self.polygons])


def _scalar_or_batch(values: npt.NDArray, batched: bool):
    return values if batched else values[0].item()


## At-fault collisions


def find_collisions(
    ego: EgoTrace, objects: ObjectTrace, map_ctx: MapContext, config: MetricsConfig, first_only: bool = False
) -> list[list[CollisionRecord]]:
    """Collision events per batch entry, one record per new contact with an object."""
    ego_b = ego.as_batch()
    n_batch = ego_b.speed.shape[0]
    records: list[list[CollisionRecord]] = [[] for _ in range(n_batch)]
    if len(objects) == 0:
        return records

    ego_corners = ego_b.corners()
    obj_corners = objects.corners()
    overlap = boxes_overlap(ego_corners[:, None], obj_corners[None]) & objects.valid[None]
    started = overlap & ~np.concatenate([np.zeros_like(overlap[..., :1]), overlap[..., :-1]], axis=-1)

    for b, n, t in sorted(zip(*np.nonzero(started)), key=lambda e: (e[0], e[2], e[1])):
        if first_only and any(r.at_fault for r in records[b]):
            continue
        records[b].append(
            _classify_collision(
                ego_corners[b, t], float(ego_b.speed[b, t]), obj_corners[n, t], objects, int(n), int(t), map_ctx, config
            )
        )
    return records


def _classify_collision(
    ego_box: npt.NDArray[np.float64],
    ego_speed: float,
    obj_box: npt.NDArray[np.float64],
    objects: ObjectTrace,
    n: int,
    t: int,
    map_ctx: MapContext,
    config: MetricsConfig,
) -> CollisionRecord:
    object_id = objects.ids[n]
    if ego_speed < config.stopped_speed:
        return CollisionRecord(tick=t, object_id=object_id, at_fault=False, reason="av_stationary")

    center = ego_box.mean(axis=0)
    forward = (ego_box[2] + ego_box[3]) / 2.0 - center
    contact = shapely.Polygon(ego_box).intersection(shapely.Polygon(obj_box))
    point = np.array(contact.centroid.coords[0]) if not contact.is_empty else objects.xy[n, t]
    if np.dot(point - center, forward) < 0.0 and map_ctx.lane_membership(center[None]).any():
        return CollisionRecord(tick=t, object_id=object_id, at_fault=False, reason="rear_contact_in_lane")
    virtual = len(objects.virtual) == len(objects) and objects.virtual[n]
    return CollisionRecord(tick=t, object_id=object_id, at_fault=True, reason="stop_line" if virtual else "front_or_side_contact")


def at_fault_collision(
    ego: EgoTrace, objects: ObjectTrace, map_ctx: MapContext, config: MetricsConfig | None = None
) -> tuple[bool, CollisionRecord | None]:
    """Whether the AV caused a collision, and the first at-fault record."""
    config = config or MetricsConfig()
    records = find_collisions(ego, objects, map_ctx, config, first_only=True)[0]
    first = next((r for r in records if r.at_fault), None)
    return first is not None, first


## Time to collision


def _projected_overlap(ego, objects, b_idx, n_idx, t_idx, tau):
    """Constant-velocity box overlap of selected (batch, object, tick) triples at offsets ``tau`` ``(M, S)``."""
    tau = tau[..., None]
    ego_vel = ego.velocity
    e_xy = ego.xy[b_idx, t_idx][:, None] + ego_vel[b_idx, t_idx][:, None] * tau
    o_xy = objects.xy[n_idx, t_idx][:, None] + objects.velocity[n_idx, t_idx][:, None] * tau
    e = box_corners(e_xy[..., 0], e_xy[..., 1], ego.heading[b_idx, t_idx][:, None], ego.length, ego.width)
    o = box_corners(
        o_xy[..., 0],
        o_xy[..., 1],
        objects.heading[n_idx, t_idx][:, None],
        objects.length[n_idx][:, None],
        objects.width[n_idx][:, None],
    )
    return boxes_overlap(e, o)


def min_time_to_collision(
    ego: EgoTrace, objects: ObjectTrace, config: MetricsConfig, horizon: float | None = None, refine: bool = True
):
    """Smallest constant-velocity time to collision over all ticks (``inf`` if none).

    Projections are checked every ``ttc_step`` and the first hit is refined by
    bisection. Ticks where the AV is stationary and objects behind the AV are
    skipped.
    """
    horizon = config.ttc_horizon if horizon is None else horizon
    ego_b = ego.as_batch()
    result = np.full(ego_b.speed.shape[0], np.inf)
    if len(objects) == 0:
        return _scalar_or_batch(result, ego.batched)

    taus = np.arange(1, int(round(horizon / config.ttc_step)) + 1) * config.ttc_step
    ego_diag = np.hypot(ego.length, ego.width)
    obj_diag = np.hypot(objects.length, objects.width)

    # Candidate (batch, object, tick) triples: AV moving, object observed, ahead and reachable.
    rel = objects.xy[None] - ego_b.xy[:, None]
    cos_h, sin_h = np.cos(ego_b.heading)[:, None], np.sin(ego_b.heading)[:, None]
    ahead = rel[..., 0] * cos_h + rel[..., 1] * sin_h >= 0.0
    closing = np.linalg.norm(ego_b.velocity[:, None] - objects.velocity[None], axis=-1) * horizon
    reach = np.linalg.norm(rel, axis=-1) <= closing + (ego_diag + obj_diag[None, :, None]) / 2.0
    moving = (ego_b.speed >= config.stopped_speed)[:, None]
    b_idx, n_idx, t_idx = np.nonzero(objects.valid[None] & ahead & reach & moving)
    if len(b_idx) == 0:
        return _scalar_or_batch(result, ego.batched)

    grid = np.broadcast_to(taus, (len(b_idx), len(taus)))
    hits = _projected_overlap(ego_b, objects, b_idx, n_idx, t_idx, grid)
    has_hit = hits.any(axis=1)
    ttc = np.where(has_hit, taus[np.argmax(hits, axis=1)], np.inf)

    if refine and has_hit.any():
        rows = np.flatnonzero(has_hit)
        hi = ttc[rows]
        lo = hi - config.ttc_step
        while np.any(hi - lo > _TTC_REFINE_TOL):
            mid = (lo + hi) / 2.0
            inside = _projected_overlap(ego_b, objects, b_idx[rows], n_idx[rows], t_idx[rows], mid[:, None])[:, 0]
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        ttc[rows] = hi

    np.minimum.at(result, b_idx, ttc)
    return _scalar_or_batch(result, ego.batched)


def ttc_within_bound(ego: EgoTrace, objects: ObjectTrace, config: MetricsConfig | None = None, horizon: float | None = None):
    config = config or MetricsConfig()
    ttc = np.asarray(min_time_to_collision(ego, objects, config, horizon))
    passed = (ttc >= config.ttc_threshold).astype(np.float64)
    return passed if ego.batched else float(passed)


## Map compliance


def drivable_compliance(ego: EgoTrace, map_ctx: MapContext):
    """1 when every footprint corner stays within the (tolerance-buffered) drivable area."""
    corners = ego.as_batch().corners()
    flat = corners.reshape(-1, 2)
    if map_ctx.drivable_tolerant.is_empty:
        inside = np.zeros(len(flat), dtype=bool)
    else:
        inside = shapely.intersects_xy(map_ctx.drivable_tolerant, flat[:, 0], flat[:, 1])
    ok = inside.reshape(corners.shape[0], -1).all(axis=1).astype(np.float64)
    return _scalar_or_batch(ok, ego.batched)


def _lane_tangents(lane: Lane, points: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    centerline = lane.centerline_array
    proj = project_points(centerline, points)
    seg = np.diff(drop_repeated_points(centerline), axis=0)
    tangent = seg[proj.segment]
    return tangent / np.linalg.norm(tangent, axis=1, keepdims=True)


def wrong_way_distance(ego: EgoTrace, map_ctx: MapContext) -> npt.NDArray[np.float64]:
    """Per-step distance driven against every lane containing the AV center, ``(B, T - 1)``."""
    ego_b = ego.as_batch()
    n_batch, n_ticks = ego_b.speed.shape
    if n_ticks < 2 or not map_ctx.polygons:
        return np.zeros((n_batch, max(n_ticks - 1, 0)))
    starts = ego_b.xy[:, :-1].reshape(-1, 2)
    step = np.diff(ego_b.xy, axis=1).reshape(-1, 2)
    membership = map_ctx.lane_membership(starts)
    max_dot = np.full(len(starts), -np.inf)
    for lane, inside in zip(map_ctx.lanes, membership):
        if not inside.any():
            continue
        tangents = _lane_tangents(lane, starts[inside])
        dots = np.einsum("nd,nd->n", step[inside], tangents)
        max_dot[inside] = np.maximum(max_dot[inside], dots)
    against = np.where(np.isfinite(max_dot), np.maximum(0.0, -max_dot), 0.0)
    return against.reshape(n_batch, n_ticks - 1)


def driving_direction(ego: EgoTrace, map_ctx: MapContext, config: MetricsConfig | None = None):
    config = config or MetricsConfig()
    against = wrong_way_distance(ego, map_ctx)
    window = max(int(round(config.direction_window / ego.dt)), 1)
    if against.shape[1] == 0:
        worst = np.zeros(against.shape[0])
    else:
        kernel = np.ones(min(window, against.shape[1]))
        worst = np.array([np.convolve(row, kernel, mode="valid").max() for row in against])
    score = np.where(worst < config.direction_compliant, 1.0, np.where(worst < config.direction_violation, 0.5, 0.0))
    return _scalar_or_batch(score, ego.batched)


## Comfort


@dataclass(frozen=True)
class ComfortSignals:
    lon_accel: npt.NDArray[np.float64]
    lat_accel: npt.NDArray[np.float64]
    jerk: npt.NDArray[np.float64]
    lon_jerk: npt.NDArray[np.float64]
    yaw_rate: npt.NDArray[np.float64]
    yaw_accel: npt.NDArray[np.float64]


def comfort_signals(ego: EgoTrace) -> ComfortSignals:
    ego_b = ego.as_batch()

    def derive(x, order):
        return savgol_filter(x, _SAVGOL_WINDOW, _SAVGOL_ORDER, deriv=order, delta=ego.dt, axis=-1, mode="interp")

    heading = np.unwrap(ego_b.heading, axis=-1)
    speed = savgol_filter(ego_b.speed, _SAVGOL_WINDOW, _SAVGOL_ORDER, axis=-1, mode="interp")
    lon_accel = derive(ego_b.speed, 1)
    yaw_rate = derive(heading, 1)
    yaw_accel = derive(heading, 2)
    lat_accel = speed * yaw_rate
    magnitude = np.hypot(lon_accel, lat_accel)
    return ComfortSignals(
        lon_accel=lon_accel,
        lat_accel=lat_accel,
        jerk=derive(magnitude, 1),
        lon_jerk=derive(lon_accel, 1),
        yaw_rate=yaw_rate,
        yaw_accel=yaw_accel,
    )


def comfort(ego: EgoTrace, config: MetricsConfig | None = None):
    config = config or MetricsConfig()
    ego_b = ego.as_batch()
    if ego_b.speed.shape[1] < _SAVGOL_WINDOW:
        return _scalar_or_batch(np.ones(ego_b.speed.shape[0]), ego.batched)
    sig = comfort_signals(ego_b)
    bounds = config.comfort
    ok = (
        (sig.lon_accel >= bounds.min_lon_accel).all(axis=1)
        & (sig.lon_accel <= bounds.max_lon_accel).all(axis=1)
        & (np.abs(sig.lat_accel) <= bounds.max_abs_lat_accel).all(axis=1)
        & (np.abs(sig.jerk) <= bounds.max_abs_jerk).all(axis=1)
        & (np.abs(sig.lon_jerk) <= bounds.max_abs_lon_jerk).all(axis=1)
        & (np.abs(sig.yaw_rate) <= bounds.max_abs_yaw_rate).all(axis=1)
        & (np.abs(sig.yaw_accel) <= bounds.max_abs_yaw_accel).all(axis=1)
    )
    return _scalar_or_batch(ok.astype(np.float64), ego.batched)


## Progress and speed


def route_progress(ego: EgoTrace, path: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """Arclength gained along ``path`` between the first and last tick, per batch entry."""
    ego_b = ego.as_batch()
    ends = np.concatenate([ego_b.xy[:, 0], ego_b.xy[:, -1]])
    s = project_points(path, ends).s
    n = ego_b.xy.shape[0]
    return s[n:] - s[:n]


def progress(ego: EgoTrace, expert_xy: npt.ArrayLike, map_ctx: MapContext, config: MetricsConfig | None = None):
    """AV route progress relative to the expert's, clamped to ``[0, 1]``."""
    config = config or MetricsConfig()
    expert_xy = np.asarray(expert_xy, dtype=np.float64)
    path = map_ctx.route
    if path is None:
        path = drop_repeated_points(expert_xy)
        if len(path) < 2:
            return _scalar_or_batch(np.ones(ego.as_batch().xy.shape[0]), ego.batched)
    expert = EgoTrace(expert_xy, np.zeros(len(expert_xy)), np.zeros(len(expert_xy)), ego.length, ego.width, ego.dt)
    expert_progress = float(route_progress(expert, path)[0])
    ego_progress = route_progress(ego, path)
    if expert_progress < config.stationary_expert:
        return _scalar_or_batch(np.ones_like(ego_progress), ego.batched)
    return _scalar_or_batch(np.clip(ego_progress / expert_progress, 0.0, 1.0), ego.batched)


def speed_limits_at(points: npt.NDArray[np.float64], map_ctx: MapContext) -> npt.NDArray[np.float64]:
    """Highest limit among lanes containing each point; the nearest lane's limit elsewhere."""
    if not map_ctx.lanes:
        return np.full(len(points), np.inf)
    limits = np.array([lane.speed_limit for lane in map_ctx.lanes])
    membership = map_ctx.lane_membership(points)
    out = np.where(membership, limits[:, None], -np.inf).max(axis=0)
    outside = ~membership.any(axis=0)
    if outside.any():
        distances = np.stack([project_points(lane.centerline_array, points[outside]).distance for lane in map_ctx.lanes])
        out[outside] = limits[np.argmin(distances, axis=0)]
    return out


def speed_compliance(ego: EgoTrace, map_ctx: MapContext, config: MetricsConfig | None = None):
    config = config or MetricsConfig()
    ego_b = ego.as_batch()
    limits = speed_limits_at(ego_b.xy.reshape(-1, 2), map_ctx).reshape(ego_b.speed.shape)
    overspeed = np.maximum(0.0, ego_b.speed - limits).mean(axis=1)
    score = np.clip(1.0 - overspeed / config.max_overspeed, 0.0, 1.0)
    return _scalar_or_batch(score, ego.batched)


## Aggregation


def aggregate_score(report: MetricReport | dict, config: MetricsConfig | None = None):
    """Multiplier metrics times the weighted average of the remaining ones.

    Accepts a report or a mapping of components; array-valued components give
    an array of scores.
    """
    config = config or MetricsConfig()
    r = report.model_dump() if isinstance(report, MetricReport) else report
    w = config.weights
    multiplier = np.asarray(r["no_at_fault_collision"]) * r["drivable_compliance"] * r["driving_direction"]
    weighted = (
        w.ttc * np.asarray(r["ttc_within_bound"])
        + w.progress * np.asarray(r["progress"])
        + w.speed * np.asarray(r["speed_compliance"])
        + w.comfort * np.asarray(r["comfort"])
    ) / (w.ttc + w.progress + w.speed + w.comfort)
    score = multiplier * weighted
    return float(score) if score.ndim == 0 else score


def build_report(config: MetricsConfig | None = None, **components: float) -> MetricReport:
    components = {name: float(value) for name, value in components.items()}
    return MetricReport(**components, aggregate=aggregate_score(components, config))


def evaluate_episode(
    ego: EgoTrace,
    objects: ObjectTrace,
    expert_xy: npt.ArrayLike,
    map_ctx: MapContext,
    config: MetricsConfig | None = None,
) -> tuple[MetricReport, list[CollisionRecord]]:
    """All seven metrics over a full closed-loop log."""
    config = config or MetricsConfig()
    records = find_collisions(ego, objects, map_ctx, config)[0]
    components = dict(
        no_at_fault_collision=0.0 if any(r.at_fault for r in records) else 1.0,
        ttc_within_bound=ttc_within_bound(ego, objects, config),
        drivable_compliance=drivable_compliance(ego, map_ctx),
        driving_direction=driving_direction(ego, map_ctx, config),
        comfort=comfort(ego, config),
        progress=progress(ego, expert_xy, map_ctx, config),
        speed_compliance=speed_compliance(ego, map_ctx, config),
    )
    return build_report(config, **components), records
