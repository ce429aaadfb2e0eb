"""Cost-map rasterization and exact Euclidean signed distance fields.

Grids are AV-centered and AV-aligned. Cell ``(row, col)`` has its center at
local coordinates ``((col - (W - 1) / 2) * res, -(row - (H - 1) / 2) * res)``:
columns grow along the AV heading, rows grow to the AV's right.
"""

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import shapely
from pydantic import BaseModel, ConfigDict, Field

from clplan.lane_graph import drivable_area
from clplan.scene import agent_pose_at
from clplan.types import InputError, Pose2D, Scenario
from clplan.utils.geometry import box_corners, from_frame, rotate, to_frame

logger = logging.getLogger(__name__)


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    height: int = Field(500, gt=0, description="Cost map rows [method]")
    width: int = Field(500, gt=0, description="Cost map columns [method]")
    resolution: float = Field(0.2, gt=0, description="Cell size (m) [method]")

    def centered_on(self, pose: Pose2D) -> "GridSpec":
        return GridSpec(height=self.height, width=self.width, resolution=self.resolution, origin=pose)


class GridSpec(GridConfig):
    origin: Pose2D = Pose2D(x=0.0, y=0.0, heading=0.0)

    @property
    def diagonal_cells(self) -> float:
        return float(np.hypot(self.height, self.width))

    def world_to_grid(self, points: npt.ArrayLike) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """Fractional ``(row, col)`` coordinates of world points."""
        local = to_frame(np.atleast_2d(np.asarray(points, dtype=np.float64)), self.origin.xy, self.origin.heading)
        col = local[:, 0] / self.resolution + (self.width - 1) / 2.0
        row = -local[:, 1] / self.resolution + (self.height - 1) / 2.0
        return row, col

    def cell_centers(self) -> npt.NDArray[np.float64]:
        """World coordinates of every cell center, shape ``(H, W, 2)``."""
        rows, cols = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        local = np.stack(
            [(cols - (self.width - 1) / 2.0) * self.resolution, -(rows - (self.height - 1) / 2.0) * self.resolution],
            axis=-1,
        )
        return from_frame(local.reshape(-1, 2), self.origin.xy, self.origin.heading).reshape(self.height, self.width, 2)


@dataclass(frozen=True)
class Esdf:
    """Signed distances in meters, positive in free space."""

    spec: GridSpec
    values: npt.NDArray[np.float64]


def rasterize_nondrivable(scenario: Scenario, spec: GridSpec) -> npt.NDArray[np.bool_]:
    """Cells whose center is not strictly inside any lane polygon."""
    area = drivable_area(scenario.lanes)
    if area.is_empty:
        return np.ones((spec.height, spec.width), dtype=bool)
    shapely.prepare(area)
    centers = spec.cell_centers()
    inside = shapely.contains_xy(area, centers[..., 0], centers[..., 1])
    return ~inside


def rasterize_obstacles(scenario: Scenario, spec: GridSpec, include_agents_at: int | None = None) -> npt.NDArray[np.bool_]:
    """Cells covered by a static obstacle box, or by an agent box ``include_agents_at`` steps ahead."""
    boxes = [(o.pose.x, o.pose.y, o.pose.heading, *o.box) for o in scenario.obstacles]
    if include_agents_at is not None:
        for agent in scenario.agents:
            pose = agent_pose_at(agent, include_agents_at)
            if pose is not None:
                boxes.append((*pose, *agent.box))
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    if not boxes:
        return mask

    params = np.asarray(boxes, dtype=np.float64)
    polygons = shapely.polygons(box_corners(*params.T))
    occupied = shapely.unary_union(polygons)
    shapely.prepare(occupied)
    centers = spec.cell_centers()
    return shapely.intersects_xy(occupied, centers[..., 0], centers[..., 1])


def _row_distances(features: npt.NDArray[np.bool_]) -> npt.NDArray[np.float64]:
    """Per-row distance (in cells) to the nearest feature cell of the same row."""
    h, w = features.shape
    cols = np.broadcast_to(np.arange(w, dtype=np.float64), (h, w))
    left = np.maximum.accumulate(np.where(features, cols, -np.inf), axis=1)
    right = np.minimum.accumulate(np.where(features, cols, np.inf)[:, ::-1], axis=1)[:, ::-1]
    return np.minimum(cols - left, right - cols)


def _lower_envelope(f: list[float]) -> list[float]:
    """1-D squared distance transform ``D(p) = min_q (p - q)^2 + f(q)``."""
    n = len(f)
    sites = [q for q in range(n) if f[q] != np.inf]
    if not sites:
        return [np.inf] * n
    v = [sites[0]]
    # z[k] is the left end of the interval where parabola v[k] is lowest.
    z = [-np.inf, np.inf]
    for q in sites[1:]:
        p = v[-1]
        s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        while s <= z[-2]:
            v.pop()
            z.pop()
            p = v[-1]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
        z[-1] = s
        v.append(q)
        z.append(np.inf)
    out = [0.0] * n
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        q = v[k]
        out[p] = (p - q) * (p - q) + f[q]
    return out


def squared_distance_transform(features: npt.ArrayLike) -> npt.NDArray[np.float64]:
    """Exact squared Euclidean distance, in cells, from every cell to the nearest feature cell.

    Rows first (nearest feature along the row), then the lower envelope of
    parabolas along every column. Cells are ``inf`` when there is no feature.
    """
    features = np.asarray(features, dtype=bool)
    g = _row_distances(features)
    g2 = np.square(g)
    out = np.empty_like(g2)
    for col in range(features.shape[1]):
        out[:, col] = _lower_envelope(g2[:, col].tolist())
    return out


def esdf(mask: npt.ArrayLike, resolution: float, spec: GridSpec | None = None) -> Esdf:
    """Signed distance field of an occupancy mask (``True`` = occupied).

    Value is the distance to the nearest occupied cell center minus the
    distance to the nearest free cell center; both are clamped to the grid
    diagonal so all-free or all-occupied masks stay finite.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.size == 0:
        raise InputError(f"mask must be a nonempty 2-D array, got shape {mask.shape}")
    h, w = mask.shape
    if spec is None:
        spec = GridSpec(height=h, width=w, resolution=resolution)
    elif (spec.height, spec.width) != (h, w):
        raise InputError(f"mask shape {mask.shape} does not match grid {spec.height}x{spec.width}")

    diagonal = float(np.hypot(h, w))
    d_out = np.minimum(np.sqrt(squared_distance_transform(mask)), diagonal)
    d_in = np.minimum(np.sqrt(squared_distance_transform(~mask)), diagonal)
    return Esdf(spec=spec, values=(d_out - d_in) * resolution)


def sample_with_gradient(field: Esdf, points: npt.ArrayLike) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Bilinear value and its analytic gradient w.r.t. world ``(x, y)``.

    Out-of-grid points clamp to the border; the gradient component along a
    clamped axis is zero.

    Returns:
        ``(values (N,), gradients (N, 2))``.
    """
    spec = field.spec
    values = field.values
    h, w = values.shape
    row, col = spec.world_to_grid(points)

    col_c = np.clip(col, 0.0, w - 1)
    row_c = np.clip(row, 0.0, h - 1)
    col_free = (col >= 0.0) & (col <= w - 1)
    row_free = (row >= 0.0) & (row <= h - 1)

    c0 = np.clip(np.floor(col_c).astype(np.int64), 0, max(w - 2, 0))
    r0 = np.clip(np.floor(row_c).astype(np.int64), 0, max(h - 2, 0))
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fu = col_c - c0
    fv = row_c - r0

    v00, v01 = values[r0, c0], values[r0, c1]
    v10, v11 = values[r1, c0], values[r1, c1]
    value = (1 - fu) * (1 - fv) * v00 + fu * (1 - fv) * v01 + (1 - fu) * fv * v10 + fu * fv * v11

    d_col = ((1 - fv) * (v01 - v00) + fv * (v11 - v10)) * col_free
    d_row = ((1 - fu) * (v10 - v00) + fu * (v11 - v01)) * row_free
    grad_local = np.stack([d_col / spec.resolution, -d_row / spec.resolution], axis=-1)
    return value, rotate(grad_local, spec.origin.heading)


def scenario_esdf(scenario: Scenario, grid: GridConfig, kind: str = "drivable", t: int | None = None) -> Esdf:
    """AV-centered field over the nondrivable area or the obstacle set."""
    spec = grid.centered_on(scenario.av_state.pose)
    if kind == "drivable":
        mask = rasterize_nondrivable(scenario, spec)
    elif kind == "obstacles":
        mask = rasterize_obstacles(scenario, spec, include_agents_at=t)
    else:
        raise InputError(f"unknown cost map kind {kind!r}")
    return esdf(mask, spec.resolution, spec)


def to_pgm(field: Esdf) -> str:
    """Plain (P2) PGM rendering of a field, white = most clearance."""
    values = field.values
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pixels = np.rint((values - lo) * scale).astype(np.int64)
    lines = ["P2", f"{values.shape[1]} {values.shape[0]}", "255"]
    lines.extend(" ".join(str(p) for p in row) for row in pixels)
    return "\n".join(lines) + "\n"
