"""Kinematic bicycle model and the decoupled LQR / PD trajectory tracker.

The tracker works on batches: ``K`` candidate trajectories are tracked in
lock-step so forward simulation of a whole proposal set costs one NumPy pass
per tick. The scalar :func:`lqr_track` wraps a batch of one.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from clplan.types import COS, DT, SIN, VX, VY, X, Y, InputError
from clplan.utils.geometry import normalize_angle

logger = logging.getLogger(__name__)

# State array layout for batched stepping.
SX, SY, SH, SV = range(4)

# Segments searched around the time-indexed reference point.
_SEARCH_BEHIND = 4
_SEARCH_AHEAD = 16


class VehicleParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    length: float = Field(4.6, gt=0, description="AV box length (m) [decision]")
    width: float = Field(2.0, gt=0, description="AV box width (m) [decision]")
    wheelbase: float = Field(3.089, gt=0, description="Wheelbase L (m) [decision]")
    max_steer: float = Field(0.55, gt=0, description="Steering limit (rad) [decision]")
    max_accel: float = Field(2.4, gt=0, description="Acceleration limit (m/s^2) [decision]")
    max_decel: float = Field(4.0, gt=0, description="Braking limit b_max (m/s^2) [decision]")


class TrackerParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    horizon: int = Field(40, ge=1, description="Riccati recursion steps [decision]")
    q_lateral: float = Field(1.0, ge=0, description="Lateral error weight [decision]")
    q_heading: float = Field(2.0, ge=0, description="Heading error weight [decision]")
    r_steer: float = Field(8.0, gt=0, description="Steering effort weight [decision]")
    k_v: float = Field(2.0, ge=0, description="Speed error gain [decision]")
    k_s: float = Field(0.5, ge=0, description="Station error gain [decision]")
    min_speed: float = Field(0.5, gt=0, description="Lowest linearization speed (m/s) [decision]")
    stop_speed: float = Field(0.1, ge=0, description="Targets slower than this everywhere trigger stop control (m/s) [decision]")


@dataclass(frozen=True)
class BicycleState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        if self.speed < 0:
            raise InputError(f"speed must be nonnegative, got {self.speed}")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def as_array(self) -> npt.NDArray[np.float64]:
        return np.array([self.x, self.y, self.heading, self.speed], dtype=np.float64)

    @classmethod
    def from_array(cls, values: npt.ArrayLike) -> "BicycleState":
        x, y, heading, speed = (float(v) for v in values)
        return cls(x=x, y=y, heading=heading, speed=max(speed, 0.0))


@dataclass(frozen=True)
class ControlInput:
    accel: float
    steering: float


def step_states(
    states: npt.ArrayLike, accel: npt.ArrayLike, steering: npt.ArrayLike, dt: float, wheelbase: float
) -> npt.NDArray[np.float64]:
    """Forward-Euler bicycle update on a ``(..., 4)`` array of ``(x, y, heading, speed)``."""
    states = np.asarray(states, dtype=np.float64)
    x, y, heading, speed = (states[..., k] for k in range(4))
    out = np.empty_like(states)
    out[..., SX] = x + speed * np.cos(heading) * dt
    out[..., SY] = y + speed * np.sin(heading) * dt
    out[..., SH] = normalize_angle(heading + speed / wheelbase * np.tan(steering) * dt)
    out[..., SV] = np.maximum(0.0, speed + np.asarray(accel) * dt)
    return out


def bicycle_step(state: BicycleState, u: ControlInput, dt: float, wheelbase: float) -> BicycleState:
    if dt <= 0:
        raise InputError(f"dt must be positive, got {dt}")
    return BicycleState.from_array(step_states(state.as_array(), u.accel, u.steering, dt, wheelbase))


def riccati_gain(
    A: npt.ArrayLike, B: npt.ArrayLike, Q: npt.ArrayLike, R: npt.ArrayLike, horizon: int
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """First-step gain of the finite-horizon discrete LQR, by backward Riccati recursion.

    Returns:
        ``(K, P)`` with control law ``u = -K x`` and ``P`` the cost-to-go
        matrix after ``horizon`` backward steps.
    """
    if horizon < 1:
        raise InputError(f"horizon must be at least 1, got {horizon}")
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (A, B, Q, R))
    P = Q.copy()
    K = np.zeros((B.shape[1], A.shape[0]))
    for _ in range(horizon):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
    return K, P


def lateral_model(speed: float, dt: float, wheelbase: float) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Discrete lateral / heading error dynamics linearized at ``speed``."""
    A = np.array([[1.0, speed * dt], [0.0, 1.0]])
    B = np.array([[0.0], [speed * dt / wheelbase]])
    return A, B


@lru_cache(maxsize=4096)
def _lateral_gain(speed: float, dt: float, wheelbase: float, q_lat: float, q_head: float, r: float, horizon: int) -> tuple[float, float]:
    A, B = lateral_model(speed, dt, wheelbase)
    K, _ = riccati_gain(A, B, np.diag([q_lat, q_head]), [[r]], horizon)
    return float(K[0, 0]), float(K[0, 1])


def lateral_gains(speeds: npt.ArrayLike, dt: float, vehicle: VehicleParams, tracker: TrackerParams) -> npt.NDArray[np.float64]:
    """``(K, 2)`` gains; speeds are floored at ``min_speed`` and rounded to 0.01 m/s."""
    keys = np.round(np.maximum(np.asarray(speeds, dtype=np.float64), tracker.min_speed), 2)
    unique, inverse = np.unique(keys, return_inverse=True)
    table = np.array(
        [
            _lateral_gain(
                float(v), dt, vehicle.wheelbase, tracker.q_lateral, tracker.q_heading, tracker.r_steer, tracker.horizon
            )
            for v in unique
        ]
    )
    return table[inverse.reshape(keys.shape)]


@dataclass(frozen=True)
class TrackingReference:
    """Targets prepared for tracking, extended one step back to planning time.

    Index ``j`` of every array is the reference at ``j * dt`` after planning;
    the input trajectory's point ``k`` becomes index ``k + 1``.
    """

    points: npt.NDArray[np.float64]
    headings: npt.NDArray[np.float64]
    speeds: npt.NDArray[np.float64]
    accels: npt.NDArray[np.float64]
    arclength: npt.NDArray[np.float64]
    curvature: npt.NDArray[np.float64]
    stop: npt.NDArray[np.bool_]
    dt: float

    @classmethod
    def from_trajectories(cls, trajectories: npt.ArrayLike, dt: float = DT, stop_speed: float = 0.1) -> "TrackingReference":
        trajs = np.asarray(trajectories, dtype=np.float64)
        if trajs.ndim == 2:
            trajs = trajs[None]
        if trajs.shape[1] == 0:
            raise InputError("cannot track an empty trajectory")
        heading = np.arctan2(trajs[..., SIN], trajs[..., COS])
        speed = np.hypot(trajs[..., VX], trajs[..., VY])
        v_before = np.maximum(0.0, 2.0 * speed[:, 0] - speed[:, 1]) if trajs.shape[1] > 1 else speed[:, 0]
        direction = np.stack([np.cos(heading[:, 0]), np.sin(heading[:, 0])], axis=-1)
        p_before = trajs[:, 0, X : Y + 1] - direction * (v_before * dt)[:, None]

        points = np.concatenate([p_before[:, None, :], trajs[..., X : Y + 1]], axis=1)
        headings = np.concatenate([heading[:, :1], heading], axis=1)
        speeds = np.concatenate([v_before[:, None], speed], axis=1)
        accels = np.zeros_like(speeds)
        accels[:, :-1] = np.diff(speeds, axis=1) / dt

        seg = np.linalg.norm(np.diff(points, axis=1), axis=-1)
        arclength = np.concatenate([np.zeros((len(points), 1)), np.cumsum(seg, axis=1)], axis=1)
        dtheta = normalize_angle(np.diff(headings, axis=1))
        curvature = np.zeros_like(speeds)
        curvature[:, :-1] = np.divide(dtheta, seg, out=np.zeros_like(seg), where=seg > 1e-6)
        curvature[:, -1] = curvature[:, -2]

        return cls(
            points=points,
            headings=headings,
            speeds=speeds,
            accels=accels,
            arclength=arclength,
            curvature=curvature,
            stop=speeds.max(axis=1) < stop_speed,
            dt=dt,
        )

    def __len__(self) -> int:
        return len(self.points)


def track(
    reference: TrackingReference,
    states: npt.ArrayLike,
    t_index: int,
    vehicle: VehicleParams,
    tracker: TrackerParams,
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Batched control ``(accel, steering)`` for ``states`` of shape ``(K, 4)`` at ``t_index * dt``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = len(reference)
    dt = reference.dt
    last = reference.points.shape[1] - 1
    i = min(max(t_index, 0), last)
    rows = np.arange(n)

    # Lateral: nearest point on the target near the time-indexed reference.
    lo = max(0, min(i - _SEARCH_BEHIND, last - 1))
    hi = max(lo + 1, min(last, i + _SEARCH_AHEAD))
    starts = reference.points[:, lo:hi]
    seg = reference.points[:, lo + 1 : hi + 1] - starts
    seg_len2 = np.einsum("ksd,ksd->ks", seg, seg)
    query = states[:, None, SX : SY + 1]
    frac = np.einsum("ksd,ksd->ks", query - starts, seg) / np.maximum(seg_len2, 1e-12)
    frac = np.clip(frac, 0.0, 1.0)
    foot = starts + frac[..., None] * seg
    best = np.argmin(np.linalg.norm(query - foot, axis=-1), axis=1)
    j = lo + best
    tb = frac[rows, best]

    theta_ref = reference.headings[rows, j] + tb * normalize_angle(
        reference.headings[rows, j + 1] - reference.headings[rows, j]
    )
    offset = states[:, SX : SY + 1] - foot[rows, best]
    e_lat = np.cos(theta_ref) * offset[:, 1] - np.sin(theta_ref) * offset[:, 0]
    e_head = normalize_angle(states[:, SH] - theta_ref)
    gains = lateral_gains(states[:, SV], dt, vehicle, tracker)
    feedforward = np.arctan(vehicle.wheelbase * reference.curvature[rows, j])
    steering = feedforward - (gains[:, 0] * e_lat + gains[:, 1] * e_head)

    # Longitudinal: speed and station feedback around the time-indexed reference.
    s_proj = reference.arclength[rows, j] + tb * np.sqrt(seg_len2[rows, best])
    accel = (
        reference.accels[:, i]
        + tracker.k_v * (reference.speeds[:, i] - states[:, SV])
        + tracker.k_s * (reference.arclength[:, i] - s_proj)
    )

    stop = reference.stop
    accel = np.where(stop, np.clip(-states[:, SV] / dt, -vehicle.max_decel, 0.0), accel)
    steering = np.where(stop, 0.0, steering)
    return (
        np.clip(accel, -vehicle.max_decel, vehicle.max_accel),
        np.clip(steering, -vehicle.max_steer, vehicle.max_steer),
    )


def lqr_track(
    state: BicycleState,
    target: npt.ArrayLike,
    t_index: int,
    vehicle: VehicleParams | None = None,
    tracker: TrackerParams | None = None,
    dt: float = DT,
) -> ControlInput:
    """Control that tracks ``target`` from ``state``, ``t_index`` ticks after planning."""
    vehicle = vehicle or VehicleParams()
    tracker = tracker or TrackerParams()
    reference = TrackingReference.from_trajectories(target, dt, tracker.stop_speed)
    accel, steering = track(reference, state.as_array()[None], t_index, vehicle, tracker)
    return ControlInput(accel=float(accel[0]), steering=float(steering[0]))
