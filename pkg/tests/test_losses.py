from __future__ import annotations

import math

import numpy as np
import pytest

from clplan.costmap import Esdf, GridSpec
from clplan.gradcheck import (
    check_auxiliary_clear,
    check_auxiliary_gradient,
    check_auxiliary_hand_case,
    check_contrastive_gradient,
    check_contrastive_scale,
    run_gradcheck,
)
from clplan.lane_graph import ReferenceLine
from clplan.losses import (
    CoveringCircleModel,
    LossConfig,
    LossWeights,
    SupervisedTerms,
    assign_target,
    batch_contrastive_loss,
    triplet_losses,
    collision_loss,
    contrastive_loss,
    covering_circle_centers,
    drivable_area_loss,
    imitation_loss,
    prediction_loss,
    total_loss,
)
from clplan.types import COS, SIN, TRAJECTORY_CHANNELS, X, Y, DegenerateVectorError, InputError
from clplan.utils.geometry import polyline_headings, resample_polyline

MODEL = CoveringCircleModel()


def _linear_field() -> Esdf:
    spec = GridSpec(height=41, width=41, resolution=0.5)
    return Esdf(spec=spec, values=spec.cell_centers()[..., 1].copy())


def _trajectory(xy, heading: float = 0.0) -> np.ndarray:
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    traj = np.zeros((len(xy), TRAJECTORY_CHANNELS))
    traj[:, [X, Y]] = xy
    traj[:, COS], traj[:, SIN] = np.cos(heading), np.sin(heading)
    return traj


def _straight_ref(start, direction: float, length: float, n: int = 60) -> ReferenceLine:
    start = np.asarray(start, dtype=float)
    end = start + length * np.array([np.cos(direction), np.sin(direction)])
    points, arclength = resample_polyline(np.stack([start, end]), n)
    return ReferenceLine(points=points, headings=polyline_headings(points), arclength=arclength, source_lane_ids=("l",))


def test_circle_centers():
    traj = _trajectory([[1.0, 2.0]])
    np.testing.assert_allclose(
        covering_circle_centers(traj, CoveringCircleModel(offsets=(-1.0, 0.0, 1.0))),
        [[[0.0, 2.0], [1.0, 2.0], [2.0, 2.0]]],
    )
    np.testing.assert_allclose(covering_circle_centers(traj, CoveringCircleModel(offsets=(0.0,))), [[[1.0, 2.0]]])
    turned = covering_circle_centers(_trajectory([[0.0, 0.0]], np.pi / 2), CoveringCircleModel(offsets=(1.0,)))
    np.testing.assert_allclose(turned, [[[0.0, 1.0]]], atol=1e-12)


def test_clear_trajectory_has_zero_loss():
    assert check_auxiliary_clear(MODEL).passed


def test_single_circle_violation():
    model = CoveringCircleModel(offsets=(0.0,))
    loss, grad = drivable_area_loss(_trajectory([[0.0, 0.9]]), _linear_field(), model)
    assert loss == pytest.approx(0.3 / (1 + 1e-6), abs=1e-9)
    np.testing.assert_allclose(grad[0, [X, Y]], [0.0, -1.0 / (1 + 1e-6)], atol=1e-9)
    np.testing.assert_array_equal(grad[:, 4:], 0.0)


def test_hand_case_and_gradient():
    assert check_auxiliary_hand_case(MODEL).passed
    assert check_auxiliary_gradient(np.random.default_rng(5), MODEL).passed


def test_loss_monotone_in_violation_depth():
    field = _linear_field()
    losses = [drivable_area_loss(_trajectory([[0.0, y]]), field, MODEL)[0] for y in (1.1, 0.8, 0.5, 0.2)]
    assert all(a <= b for a, b in zip(losses, losses[1:]))


def test_horizon_normalization():
    traj = _trajectory([[0.0, 0.9], [0.0, 5.0]])
    loss, _ = drivable_area_loss(traj, _linear_field(), MODEL, normalization="horizon")
    assert loss == pytest.approx(3 * 0.3 / 2)


def test_collision_loss_per_step_fields():
    field = _linear_field()
    far = Esdf(spec=field.spec, values=field.values + 100.0)
    traj = _trajectory([[0.0, 0.9], [0.0, 0.9]])
    single, _ = collision_loss(traj, field, MODEL)
    per_step, _ = collision_loss(traj, [field, far], MODEL)
    assert single == pytest.approx(0.3 * 6 / (6 + 1e-6))
    assert per_step == pytest.approx(0.3 * 3 / (3 + 1e-6))
    with pytest.raises(InputError):
        collision_loss(traj, [field, far, far], MODEL)


def test_assign_target_examples():
    ref = _straight_ref((0.0, 0.0), 0.0, 110.0)
    assert assign_target([[33.0, 0.0]], [ref], 12) == (0, 3)
    assert assign_target([[150.0, 0.0]], [ref], 12) == (0, 11)
    other = _straight_ref((0.0, 3.5), 0.0, 110.0)
    assert assign_target([[50.0, 0.5]], [ref, other], 12)[0] == 0
    assert assign_target([[50.0, 3.0]], [ref, other], 12)[0] == 1
    assert assign_target([[50.0, 0.0]], [], 12) is None
    with pytest.raises(InputError):
        assign_target([[0.0, 0.0]], [ref], 1)


def _oracle(endpoint: np.ndarray, refs: list[tuple[np.ndarray, float, float]], n_lon: int) -> tuple[int, int]:
    best, best_d = 0, math.inf
    for index, (start, direction, _) in enumerate(refs):
        u = np.array([np.cos(direction), np.sin(direction)])
        rel = endpoint - start
        d = abs(u[0] * rel[1] - u[1] * rel[0])
        if d < best_d:
            best, best_d = index, d
    start, direction, length = refs[best]
    s = float((endpoint - start) @ np.array([np.cos(direction), np.sin(direction)]))
    if s > length:
        return best, n_lon - 1
    s = max(s, 0.0)
    bounds = np.linspace(0.0, length, n_lon)
    for k in range(n_lon - 1):
        if bounds[k] <= s < bounds[k + 1]:
            return best, k
    return best, n_lon - 2


def test_assign_target_matches_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n_refs = int(rng.integers(1, 4))
        specs = [(rng.uniform(-20, 20, 2), rng.uniform(-np.pi, np.pi), rng.uniform(20, 120)) for _ in range(n_refs)]
        refs = [_straight_ref(start, direction, length) for start, direction, length in specs]
        n_lon = int(rng.integers(2, 20))
        endpoint = rng.uniform(-150, 150, 2)
        assert assign_target([endpoint], refs, n_lon) == _oracle(endpoint, specs, n_lon)


def test_imitation_loss_values():
    gt = _trajectory(np.column_stack([np.arange(80.0), np.zeros(80)]))
    grid = np.broadcast_to(gt, (2, 3, 80, 6)).copy()
    perfect = np.full(6, -np.inf)
    perfect[4] = 0.0
    assert imitation_loss(grid, perfect, gt, gt, (1, 1)) == pytest.approx(0.0)
    assert imitation_loss(grid, np.zeros(6), gt, gt, (1, 1)) == pytest.approx(math.log(6))
    assert imitation_loss(grid, perfect, gt + 0.5, gt, (1, 1)) == pytest.approx(0.125)
    assert imitation_loss(grid, perfect, gt + 0.5, gt, None) == pytest.approx(0.125)
    with pytest.raises(InputError):
        imitation_loss(grid, perfect, gt, gt, (2, 0))


def test_prediction_loss_values():
    gt = np.zeros((3, 80, 2))
    mask = np.ones((3, 80), dtype=bool)
    assert prediction_loss(gt, gt, mask) == 0.0
    assert prediction_loss(gt + 1.5, gt, mask) == pytest.approx(1.0)
    assert prediction_loss(gt + 1.5, gt, np.zeros_like(mask)) == 0.0
    with pytest.raises(InputError):
        prediction_loss(gt[:2], gt, mask)


def test_contrastive_examples():
    loss, _ = contrastive_loss([1.0, 0.0], [0.0, 1.0], [0.0, -1.0])
    assert abs(loss - math.log(2)) < 1e-12
    loss, _ = contrastive_loss([1.0, 0.0], [2.0, 0.0], [-3.0, 0.0], 0.1)
    assert abs(loss - math.log1p(math.exp(-20))) < 1e-12
    with pytest.raises(DegenerateVectorError):
        contrastive_loss([0.0, 0.0], [1.0, 0.0], [0.0, 1.0])
    with pytest.raises(InputError):
        contrastive_loss([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], sigma=0.0)


def test_contrastive_gradient_and_scale():
    rng = np.random.default_rng(2)
    assert check_contrastive_gradient(rng, 0.1, dim=128).passed
    assert check_contrastive_scale(rng, 0.1).passed


def test_contrastive_monotone_in_similarities():
    rng = np.random.default_rng(4)
    for _ in range(50):
        z, z_pos, z_neg = (rng.normal(size=8) for _ in range(3))
        base, _ = contrastive_loss(z, z_pos, z_neg)
        closer_pos, _ = contrastive_loss(z, z_pos + 0.1 * np.linalg.norm(z_pos) * z / np.linalg.norm(z), z_neg)
        closer_neg, _ = contrastive_loss(z, z_pos, z_neg + 0.1 * np.linalg.norm(z_neg) * z / np.linalg.norm(z))
        assert closer_pos < base < closer_neg


def test_batch_contrastive_is_mean():
    rng = np.random.default_rng(8)
    z, z_pos, z_neg = (rng.normal(size=(4, 5)) for _ in range(3))
    loss, grads = batch_contrastive_loss(z, z_pos, z_neg)
    singles = [contrastive_loss(z[i], z_pos[i], z_neg[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]))
    np.testing.assert_allclose(grads[0][2], singles[2][1][0] / 4)


def test_total_loss():
    weights = LossWeights()
    assert total_loss(0, 0, 0, 0, weights) == 0
    assert total_loss(1, 2, 3, 4, weights) == 10
    assert total_loss(1, 2, 3, 4, LossWeights(contrastive=0.0)) == 6


def test_triplet_losses_average_supervised_terms():
    breakdown = triplet_losses(
        SupervisedTerms(1.0, 2.0, 0.0),
        SupervisedTerms(3.0, 0.0, 2.0),
        [1.0, 0.0],
        [0.0, 1.0],
        [0.0, -1.0],
        LossConfig(),
    )
    assert (breakdown.imitation, breakdown.prediction, breakdown.auxiliary) == (2.0, 1.0, 1.0)
    assert breakdown.contrastive == pytest.approx(math.log(2))
    assert breakdown.total == pytest.approx(4.0 + math.log(2))


def test_full_gradcheck_passes():
    report = run_gradcheck(seed=0)
    assert report.passed, [c for c in report.checks if not c.passed]
