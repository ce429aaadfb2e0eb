"""IDM vehicles constrained to fixed paths.

Used both to synthesize the logged traffic of generated scenarios and to
drive reactive agents during an episode: each vehicle keeps its lateral path
and IDM sets its speed, with every other body near the path ahead acting as
a leader.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from clplan.proposer import IdmParams, idm_acceleration
from clplan.utils.geometry import cumulative_arclength, drop_repeated_points, interpolate_polyline, project_points

logger = logging.getLogger(__name__)


@dataclass
class PathVehicle:
    """One vehicle; ``limits`` holds ``(arclength, desired speed)`` breakpoints along the path."""

    id: str
    path: npt.NDArray[np.float64]
    s: float
    v: float
    box: tuple[float, float]
    limits: list[tuple[float, float]]
    stops: list[float] = field(default_factory=list)
    static: bool = False

    def __post_init__(self):
        self.path = drop_repeated_points(np.asarray(self.path, dtype=np.float64))
        self.arclength = cumulative_arclength(self.path)

    def desired_speed(self) -> float:
        speed = self.limits[0][1]
        for start, limit in self.limits:
            if self.s >= start:
                speed = limit
        return speed

    def pose(self) -> tuple[float, float, float]:
        point, heading = interpolate_polyline(self.path, self.arclength, self.s)
        return float(point[0, 0]), float(point[0, 1]), float(heading[0])


@dataclass(frozen=True)
class Body:
    """A road user the path vehicles must not run into."""

    x: float
    y: float
    vx: float
    vy: float
    length: float
    width: float


class PathTraffic:
    def __init__(self, vehicles: list[PathVehicle], idm: IdmParams, margin: float = 0.3):
        self.vehicles = vehicles
        self.idm = idm
        self.margin = margin

    def bodies(self) -> list[Body]:
        out = []
        for vehicle in self.vehicles:
            x, y, heading = vehicle.pose()
            out.append(
                Body(x, y, vehicle.v * np.cos(heading), vehicle.v * np.sin(heading), vehicle.box[0], vehicle.box[1])
            )
        return out

    def accelerations(self, others: list[Body] = (), holds: list[float | None] | None = None) -> npt.NDArray[np.float64]:
        """IDM acceleration of every vehicle against all bodies ahead on its path.

        ``holds`` adds a per-vehicle stop arclength for this step only.
        """
        own = self.bodies()
        bodies = own + list(others)
        centers = np.array([[b.x, b.y] for b in bodies]).reshape(-1, 2)
        accel = np.zeros(len(self.vehicles))
        for i, vehicle in enumerate(self.vehicles):
            if vehicle.static:
                continue
            gaps, closing = [np.inf], [0.0]
            stops = list(vehicle.stops)
            if holds is not None and holds[i] is not None:
                stops.append(holds[i])
            for stop in stops:
                if stop > vehicle.s - 0.5:
                    gaps.append(stop - vehicle.s - vehicle.box[0] / 2.0)
                    closing.append(vehicle.v)

            projection = project_points(vehicle.path, centers)
            _, _, heading = vehicle.pose()
            tangent = np.array([np.cos(heading), np.sin(heading)])
            for j, body in enumerate(bodies):
                if j == i:
                    continue
                ahead = projection.s_raw[j] - vehicle.s
                if ahead <= 0.0 or abs(projection.d[j]) > (vehicle.box[1] + body.width) / 2.0 + self.margin:
                    continue
                along = max(0.0, float(np.dot([body.vx, body.vy], tangent)))
                gaps.append(ahead - (vehicle.box[0] + body.length) / 2.0)
                closing.append(vehicle.v - along)

            accel[i] = np.min(
                idm_acceleration(vehicle.v, vehicle.desired_speed(), np.array(gaps), np.array(closing), self.idm)
            )
        return accel

    def step(self, dt: float, others: list[Body] = (), holds: list[float | None] | None = None) -> None:
        accel = self.accelerations(others, holds)
        for vehicle, a in zip(self.vehicles, accel):
            if vehicle.static:
                continue
            vehicle.s += vehicle.v * dt
            vehicle.v = max(0.0, vehicle.v + float(a) * dt)
