"""Finite-difference checks for every analytic gradient in the loss stack.

Each check builds its own inputs from a child of the run seed, so the report
is reproducible and independent of the order checks run in.
"""

import logging
import math
from collections.abc import Callable

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import cdist

from clplan.costmap import Esdf, GridSpec, esdf, sample_with_gradient, squared_distance_transform
from clplan.losses import CoveringCircleModel, auxiliary_loss, contrastive_loss, covering_circle_centers
from clplan.types import COS, SIN, TRAJECTORY_CHANNELS, X, Y, Pose2D
from clplan.utils.geometry import from_frame

logger = logging.getLogger(__name__)


class CheckResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    passed: bool
    error: float | None = None
    tolerance: float | None = None
    detail: str = ""


class GradcheckReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    passed: bool
    checks: list[CheckResult]


def _relative_error(analytic: npt.ArrayLike, numeric: npt.ArrayLike) -> float:
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _result(name: str, error: float, tolerance: float, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=bool(error <= tolerance), error=error, tolerance=tolerance, detail=detail)


def _brute_force_squared_edt(mask: npt.NDArray[np.bool_]) -> npt.NDArray[np.float64]:
    cells = np.argwhere(np.ones_like(mask)).astype(np.float64)
    features = np.argwhere(mask).astype(np.float64)
    if len(features) == 0:
        return np.full(mask.shape, np.inf)
    return cdist(cells, features, "sqeuclidean").min(axis=1).reshape(mask.shape)


def check_esdf_exact(rng: np.random.Generator, n_masks: int = 100, size: int = 64) -> CheckResult:
    mismatches = 0
    for _ in range(n_masks):
        mask = rng.random((size, size)) < rng.uniform(0.01, 0.3)
        if not np.array_equal(squared_distance_transform(mask), _brute_force_squared_edt(mask)):
            mismatches += 1
    return CheckResult(
        name="esdf_exact",
        passed=mismatches == 0,
        error=float(mismatches),
        tolerance=0.0,
        detail=f"{n_masks} random {size}x{size} masks against all-pairs distances",
    )


def _interior_points(spec: GridSpec, rng: np.random.Generator, n: int) -> npt.NDArray[np.float64]:
    """World points strictly inside cells, away from the cell edges."""
    row = rng.integers(0, spec.height - 1, n) + rng.uniform(0.05, 0.95, n)
    col = rng.integers(0, spec.width - 1, n) + rng.uniform(0.05, 0.95, n)
    local = np.stack(
        [(col - (spec.width - 1) / 2.0) * spec.resolution, -(row - (spec.height - 1) / 2.0) * spec.resolution], axis=-1
    )
    return from_frame(local, spec.origin.xy, spec.origin.heading)


def check_bilinear_gradient(rng: np.random.Generator, n_points: int = 1000) -> CheckResult:
    spec = GridSpec(height=32, width=32, resolution=0.2, origin=Pose2D(x=3.0, y=-2.0, heading=0.4))
    field = Esdf(spec=spec, values=rng.normal(0.0, 2.0, (spec.height, spec.width)))
    points = _interior_points(spec, rng, n_points)
    _, analytic = sample_with_gradient(field, points)

    h = 1e-4 * spec.resolution
    numeric = np.empty_like(analytic)
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = h
        plus, _ = sample_with_gradient(field, points + step)
        minus, _ = sample_with_gradient(field, points - step)
        numeric[:, axis] = (plus - minus) / (2 * h)
    return _result("bilinear_gradient", _relative_error(analytic, numeric), 1e-5, f"{n_points} interior points")


def _linear_field() -> Esdf:
    """Field equal to the world ``y`` coordinate: nondrivable below ``y = 0``."""
    spec = GridSpec(height=41, width=41, resolution=0.5)
    return Esdf(spec=spec, values=spec.cell_centers()[..., 1].copy())


def _straight_trajectory(ys: list[float]) -> npt.NDArray[np.float64]:
    traj = np.zeros((len(ys), TRAJECTORY_CHANNELS))
    traj[:, X] = np.linspace(-2.0, 2.0, len(ys))
    traj[:, Y] = ys
    traj[:, COS] = 1.0
    return traj


def check_auxiliary_clear(model: CoveringCircleModel) -> CheckResult:
    clearance = model.radius + model.epsilon + 1.0
    loss, grad = auxiliary_loss(_straight_trajectory([clearance] * 5), _linear_field(), model)
    error = abs(loss) + float(np.abs(grad).max())
    return _result("auxiliary_zero_when_clear", error, 0.0, f"clearance {clearance:.2f} m everywhere")


def check_auxiliary_hand_case(model: CoveringCircleModel) -> CheckResult:
    """Steps at known heights over a linear field: each circle's violation is ``R + eps - y``."""
    ys = [0.5, 1.0, 3.0]
    loss, _ = auxiliary_loss(_straight_trajectory(ys), _linear_field(), model, normalization="horizon")
    threshold = model.radius + model.epsilon
    expected = sum(len(model.offsets) * max(0.0, threshold - y) for y in ys) / len(ys)
    return _result("auxiliary_hand_case", abs(loss - expected), 1e-9, f"expected {expected:.6f}")


def _kink_state(traj: npt.NDArray[np.float64], field: Esdf, model: CoveringCircleModel) -> tuple:
    centers = covering_circle_centers(traj, model).reshape(-1, 2)
    row, col = field.spec.world_to_grid(centers)
    d, _ = sample_with_gradient(field, centers)
    return tuple(np.floor(row).astype(int)), tuple(np.floor(col).astype(int)), tuple(d < model.radius + model.epsilon)


def check_auxiliary_gradient(rng: np.random.Generator, model: CoveringCircleModel) -> CheckResult:
    spec = GridSpec(height=64, width=64, resolution=0.2)
    mask = np.zeros((64, 64), dtype=bool)
    mask[:, 40:] = True
    mask[rng.integers(0, 64, 12), rng.integers(0, 40, 12)] = True
    field = esdf(mask, spec.resolution, spec)

    n_steps = 16
    heading = rng.uniform(-0.3, 0.3, n_steps)
    traj = np.zeros((n_steps, TRAJECTORY_CHANNELS))
    traj[:, X] = np.linspace(-3.0, 2.5, n_steps) + rng.uniform(-0.05, 0.05, n_steps)
    traj[:, Y] = rng.uniform(-2.0, 2.0, n_steps)
    traj[:, COS], traj[:, SIN] = np.cos(heading), np.sin(heading)
    _, analytic = auxiliary_loss(traj, field, model)

    h = 1e-6
    base = _kink_state(traj, field, model)
    numeric = np.full_like(traj, np.nan)
    for index in np.ndindex(n_steps, SIN + 1):
        plus, minus = traj.copy(), traj.copy()
        plus[index] += h
        minus[index] -= h
        if _kink_state(plus, field, model) != base or _kink_state(minus, field, model) != base:
            continue
        numeric[index] = (auxiliary_loss(plus, field, model)[0] - auxiliary_loss(minus, field, model)[0]) / (2 * h)
    checked = ~np.isnan(numeric)
    error = _relative_error(analytic[checked], numeric[checked])
    return _result("auxiliary_gradient", error, 1e-5, f"{int(checked.sum())} components away from kinks")


def check_contrastive_values(sigma: float) -> list[CheckResult]:
    symmetric, _ = contrastive_loss([1.0, 0.0], [0.0, 1.0], [0.0, -1.0], sigma)
    aligned, _ = contrastive_loss([1.0, 0.0], [2.0, 0.0], [-3.0, 0.0], 0.1)
    return [
        _result("contrastive_symmetric", abs(symmetric - math.log(2.0)), 1e-12),
        _result("contrastive_separated", abs(aligned - math.log1p(math.exp(-20.0))), 1e-12),
    ]


def check_contrastive_gradient(rng: np.random.Generator, sigma: float, dim: int = 16) -> CheckResult:
    vectors = [rng.normal(size=dim) for _ in range(3)]
    _, analytic = contrastive_loss(*vectors, sigma)

    h = 1e-6
    worst = 0.0
    for which in range(3):
        numeric = np.empty(dim)
        for i in range(dim):
            plus = [v.copy() for v in vectors]
            minus = [v.copy() for v in vectors]
            plus[which][i] += h
            minus[which][i] -= h
            numeric[i] = (contrastive_loss(*plus, sigma)[0] - contrastive_loss(*minus, sigma)[0]) / (2 * h)
        worst = max(worst, _relative_error(analytic[which], numeric))
    return _result("contrastive_gradient", worst, 1e-6, f"{dim}-dimensional embeddings")


def check_contrastive_scale(rng: np.random.Generator, sigma: float) -> CheckResult:
    z, z_pos, z_neg = (rng.normal(size=8) for _ in range(3))
    reference, _ = contrastive_loss(z, z_pos, z_neg, sigma)
    scaled, _ = contrastive_loss(3.0 * z, 0.5 * z_pos, 7.0 * z_neg, sigma)
    return _result("contrastive_scale_invariance", abs(scaled - reference), 1e-9)


def run_gradcheck(seed: int = 0, circles: CoveringCircleModel | None = None, sigma: float = 0.1) -> GradcheckReport:
    """Run the whole suite; ``passed`` is true only when every check passes."""
    circles = circles or CoveringCircleModel()
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
    suite: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: check_esdf_exact(rngs[0]),
        lambda: check_bilinear_gradient(rngs[1]),
        lambda: check_auxiliary_clear(circles),
        lambda: check_auxiliary_hand_case(circles),
        lambda: check_auxiliary_gradient(rngs[2], circles),
        lambda: check_contrastive_values(sigma),
        lambda: check_contrastive_gradient(rngs[3], sigma),
        lambda: check_contrastive_scale(rngs[4], sigma),
    ]
    checks: list[CheckResult] = []
    for run in suite:
        outcome = run()
        checks.extend(outcome if isinstance(outcome, list) else [outcome])
    for check in checks:
        level = logging.INFO if check.passed else logging.WARNING
        logger.log(level, f"{check.name}: {'pass' if check.passed else 'FAIL'} (error {check.error})")
    return GradcheckReport(seed=seed, passed=all(c.passed for c in checks), checks=checks)
