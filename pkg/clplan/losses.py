"""Training-loss components with analytic gradients, and ground-truth target assignment.

Every loss returns plain floats; those with a ``grad`` return NumPy arrays
shaped like their inputs so they can be checked against finite differences.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, log_softmax

from clplan.costmap import Esdf, sample_with_gradient
from clplan.lane_graph import ReferenceLine
from clplan.types import COS, SIN, X, Y, DegenerateVectorError, InputError
from clplan.utils.geometry import project_points

logger = logging.getLogger(__name__)

# Keeps the active-term normalizer positive when no circle violates clearance.
_ACTIVE_EPS = 1e-6

AuxNormalization = Literal["active", "horizon"]


class CoveringCircleModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    offsets: tuple[float, ...] = Field(
        (-1.2, 0.0, 1.2), min_length=1, description="Circle offsets along the heading, three circles (m) [method]"
    )
    radius: float = Field(1.1, gt=0, description="Covering circle radius (m) [decision]")
    epsilon: float = Field(0.1, ge=0, description="Safety margin added to the radius (m) [decision]")


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    imitation: float = Field(1.0, ge=0, description="Imitation loss weight [method]")
    prediction: float = Field(1.0, ge=0, description="Prediction loss weight [method]")
    auxiliary: float = Field(1.0, ge=0, description="Auxiliary loss weight [method]")
    contrastive: float = Field(1.0, ge=0, description="Contrastive loss weight [method]")


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    weights: LossWeights = LossWeights()
    smooth_l1_delta: float = Field(1.0, gt=0, description="Smooth-L1 transition point [decision]")
    sigma: float = Field(0.1, gt=0, description="Contrastive temperature [method]")
    aux_normalization: AuxNormalization = Field(
        "active", description="Divide hinge sums by the active-term count or by the horizon length [decision]"
    )


def covering_circle_centers(traj: npt.ArrayLike, model: CoveringCircleModel) -> npt.NDArray[np.float64]:
    """Circle centers, shape ``(T, circles, 2)``."""
    traj = np.asarray(traj, dtype=np.float64)
    offsets = np.asarray(model.offsets, dtype=np.float64)
    return traj[:, None, X : Y + 1] + offsets[None, :, None] * traj[:, None, COS : SIN + 1]


def _hinge_loss(
    traj: npt.ArrayLike,
    fields: Sequence[Esdf],
    model: CoveringCircleModel,
    normalization: AuxNormalization,
) -> tuple[float, npt.NDArray[np.float64]]:
    traj = np.asarray(traj, dtype=np.float64)
    n_steps = len(traj)
    centers = covering_circle_centers(traj, model)
    n_circles = centers.shape[1]

    if len(fields) == 1:
        d, g = sample_with_gradient(fields[0], centers.reshape(-1, 2))
    else:
        if len(fields) != n_steps:
            raise InputError(f"expected 1 or {n_steps} fields, got {len(fields)}")
        samples = [sample_with_gradient(fields[t], centers[t]) for t in range(n_steps)]
        d = np.concatenate([s[0] for s in samples])
        g = np.concatenate([s[1] for s in samples])
    d = d.reshape(n_steps, n_circles)
    g = g.reshape(n_steps, n_circles, 2)

    violation = model.radius + model.epsilon - d
    active = violation > 0.0
    denom = active.sum() + _ACTIVE_EPS if normalization == "active" else float(n_steps)
    loss = float(violation[active].sum() / denom)

    # d(loss)/d(center) = -grad(field) / denom on active circles
    dc = -g * active[..., None] / denom
    offsets = np.asarray(model.offsets, dtype=np.float64)
    grad = np.zeros_like(traj)
    grad[:, X] = dc[..., 0].sum(axis=1)
    grad[:, Y] = dc[..., 1].sum(axis=1)
    grad[:, COS] = (dc[..., 0] * offsets[None, :]).sum(axis=1)
    grad[:, SIN] = (dc[..., 1] * offsets[None, :]).sum(axis=1)
    return loss, grad


def drivable_area_loss(
    traj: npt.ArrayLike, field: Esdf, model: CoveringCircleModel, normalization: AuxNormalization = "active"
) -> tuple[float, npt.NDArray[np.float64]]:
    """Hinge penalty on covering circles that come within ``radius + epsilon`` of nondrivable space.

    Returns:
        ``(loss, grad)`` with ``grad`` shaped like ``traj``; velocity channels
        receive zero gradient.
    """
    return _hinge_loss(traj, [field], model, normalization)


def collision_loss(
    traj: npt.ArrayLike,
    obstacle_field: Esdf | Sequence[Esdf],
    model: CoveringCircleModel,
    normalization: AuxNormalization = "active",
) -> tuple[float, npt.NDArray[np.float64]]:
    """Same hinge as :func:`drivable_area_loss` over an obstacle field.

    ``obstacle_field`` may be one field or one per trajectory step, in which
    case step ``t`` is checked against field ``t``.
    """
    fields = [obstacle_field] if isinstance(obstacle_field, Esdf) else list(obstacle_field)
    return _hinge_loss(traj, fields, model, normalization)


def auxiliary_loss(
    traj: npt.ArrayLike,
    drivable_field: Esdf,
    model: CoveringCircleModel,
    obstacle_field: Esdf | Sequence[Esdf] | None = None,
    normalization: AuxNormalization = "active",
) -> tuple[float, npt.NDArray[np.float64]]:
    loss, grad = drivable_area_loss(traj, drivable_field, model, normalization)
    if obstacle_field is not None:
        c_loss, c_grad = collision_loss(traj, obstacle_field, model, normalization)
        loss, grad = loss + c_loss, grad + c_grad
    return loss, grad


## Supervision


def assign_target(gt: npt.ArrayLike, refs: Sequence[ReferenceLine], n_lon: int) -> tuple[int, int] | None:
    """Proposal slot that contains the ground-truth endpoint.

    The endpoint goes to the reference line with the smallest absolute
    lateral offset (lower index on ties). Its arclength picks one of the
    ``n_lon - 1`` equal segments; endpoints past the line's end map to
    ``n_lon - 1``.

    Returns:
        ``(ref_index, lon_index)``, or ``None`` when there are no reference
        lines and the free head should be supervised instead.
    """
    if n_lon < 2:
        raise InputError(f"n_lon must be at least 2, got {n_lon}")
    if not refs:
        return None
    endpoint = np.asarray(gt, dtype=np.float64).reshape(-1, 2)[-1]
    projections = [project_points(ref.points, endpoint) for ref in refs]
    ref_index = int(np.argmin([abs(p.d[0]) for p in projections]))

    ref, proj = refs[ref_index], projections[ref_index]
    if proj.s_raw[0] > ref.length:
        return ref_index, n_lon - 1
    lon_index = min(math.floor(proj.s[0] / ref.length * (n_lon - 1)), n_lon - 2)
    return ref_index, int(lon_index)


def smooth_l1(pred: npt.ArrayLike, target: npt.ArrayLike, delta: float = 1.0) -> npt.NDArray[np.float64]:
    """Elementwise smooth-L1 (quadratic below ``delta``, linear above)."""
    diff = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return np.where(diff < delta, 0.5 * diff**2 / delta, diff - 0.5 * delta)


def cross_entropy(logits: npt.ArrayLike, target: int) -> float:
    return float(-log_softmax(np.asarray(logits, dtype=np.float64))[target])


def imitation_loss(
    proposals: npt.ArrayLike,
    scores: npt.ArrayLike,
    free: npt.ArrayLike,
    gt: npt.ArrayLike,
    target: tuple[int, int] | None,
    delta: float = 1.0,
) -> float:
    """Regression on the assigned target slot plus the free head, and slot classification.

    ``proposals`` is the ``(lines, profiles, T, 6)`` grid and ``scores`` its
    flattened logits. With ``target=None`` only the free head is supervised.
    """
    loss = float(smooth_l1(free, gt, delta).mean())
    if target is None:
        return loss
    proposals = np.asarray(proposals, dtype=np.float64)
    n_ref, n_lon = proposals.shape[:2]
    ref_index, lon_index = target
    if not (0 <= ref_index < n_ref and 0 <= lon_index < n_lon):
        raise InputError(f"target {target} outside the {n_ref}x{n_lon} proposal grid")
    loss += float(smooth_l1(proposals[ref_index, lon_index], gt, delta).mean())
    loss += cross_entropy(scores, ref_index * n_lon + lon_index)
    return loss


def prediction_loss(pred: npt.ArrayLike, gt: npt.ArrayLike, valid_mask: npt.ArrayLike, delta: float = 1.0) -> float:
    """Smooth-L1 averaged over valid agent-timesteps and both coordinates."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise InputError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    valid = np.asarray(valid_mask, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return 0.0
    per_step = smooth_l1(pred, gt, delta).sum(axis=-1)
    return float(per_step[valid].sum() / (count * pred.shape[-1]))


## Contrastive term


def _cosine(u: npt.NDArray[np.float64], v: npt.NDArray[np.float64]) -> tuple[float, npt.NDArray[np.float64], npt.NDArray[np.float64]]:
    """Cosine similarity and its gradients w.r.t. ``u`` and ``v``."""
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector is undefined")
    sim = float(u @ v) / (nu * nv)
    du = v / (nu * nv) - sim * u / nu**2
    dv = u / (nu * nv) - sim * v / nv**2
    return sim, du, dv


def contrastive_loss(
    z: npt.ArrayLike, z_pos: npt.ArrayLike, z_neg: npt.ArrayLike, sigma: float = 0.1
) -> tuple[float, tuple[npt.NDArray[np.float64], npt.NDArray[np.float64], npt.NDArray[np.float64]]]:
    """Two-way softmax triplet loss over cosine similarities.

    Returns:
        ``(loss, (d/dz, d/dz_pos, d/dz_neg))``.

    Raises:
        DegenerateVectorError: If any input is the zero vector.
    """
    if sigma <= 0:
        raise InputError(f"sigma must be positive, got {sigma}")
    z, z_pos, z_neg = (np.asarray(v, dtype=np.float64) for v in (z, z_pos, z_neg))
    sim_pos, dz_pos_a, dpos = _cosine(z, z_pos)
    sim_neg, dz_neg_a, dneg = _cosine(z, z_neg)

    margin = (sim_neg - sim_pos) / sigma
    loss = float(np.logaddexp(0.0, margin))
    p = float(expit(margin))
    d_sim_pos, d_sim_neg = -p / sigma, p / sigma
    grads = (d_sim_pos * dz_pos_a + d_sim_neg * dz_neg_a, d_sim_pos * dpos, d_sim_neg * dneg)
    return loss, grads


def batch_contrastive_loss(
    z: npt.ArrayLike, z_pos: npt.ArrayLike, z_neg: npt.ArrayLike, sigma: float = 0.1
) -> tuple[float, tuple[npt.NDArray[np.float64], npt.NDArray[np.float64], npt.NDArray[np.float64]]]:
    """Mean triplet loss over a ``(B, D)`` batch; gradients are ``(B, D)`` each."""
    z, z_pos, z_neg = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (z, z_pos, z_neg))
    if not (z.shape == z_pos.shape == z_neg.shape):
        raise InputError(f"batch shapes differ: {z.shape}, {z_pos.shape}, {z_neg.shape}")
    n = len(z)
    results = [contrastive_loss(z[i], z_pos[i], z_neg[i], sigma) for i in range(n)]
    loss = float(np.mean([r[0] for r in results]))
    grads = tuple(np.stack([r[1][k] for r in results]) / n for k in range(3))
    return loss, grads


## Combination


def total_loss(imitation: float, prediction: float, auxiliary: float, contrastive: float, weights: LossWeights) -> float:
    return (
        weights.imitation * imitation
        + weights.prediction * prediction
        + weights.auxiliary * auxiliary
        + weights.contrastive * contrastive
    )


@dataclass(frozen=True)
class SupervisedTerms:
    imitation: float
    prediction: float
    auxiliary: float


@dataclass(frozen=True)
class LossBreakdown:
    imitation: float
    prediction: float
    auxiliary: float
    contrastive: float
    total: float


def triplet_losses(
    original: SupervisedTerms,
    positive: SupervisedTerms,
    z: npt.ArrayLike,
    z_pos: npt.ArrayLike,
    z_neg: npt.ArrayLike,
    config: LossConfig,
) -> LossBreakdown:
    """Loss of one triplet.

    Supervised terms are averaged over the original and positive samples; the
    negative sample only enters through the contrastive term.
    """
    imitation = (original.imitation + positive.imitation) / 2.0
    prediction = (original.prediction + positive.prediction) / 2.0
    auxiliary = (original.auxiliary + positive.auxiliary) / 2.0
    contrastive, _ = contrastive_loss(z, z_pos, z_neg, config.sigma)
    return LossBreakdown(
        imitation=imitation,
        prediction=prediction,
        auxiliary=auxiliary,
        contrastive=contrastive,
        total=total_loss(imitation, prediction, auxiliary, contrastive, config.weights),
    )
