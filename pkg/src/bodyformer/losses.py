"""Training losses over mesh vertices, joints, projections, and rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor
from .numerics import tensor as T


@dataclass(frozen=True)
class LossWeights:
    vertices: float = 100.0
    joints3d: float = 1000.0
    joints2d: float = 100.0
    rotations: float = 50.0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def loss_basic(pred_vertices, true_vertices, pred_joints, true_joints,
               pred_proj, true_proj, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum: L1 on vertices, squared error on 3-d and 2-d joints.

    All three terms are means over every tensor entry, so the value does not
    drift with vertex or joint count.
    """
    dv = T.sub(_as_tensor(pred_vertices), _as_tensor(true_vertices))
    dj = T.sub(_as_tensor(pred_joints), _as_tensor(true_joints))
    dp = T.sub(_as_tensor(pred_proj), _as_tensor(true_proj))
    total = T.mul(Tensor(weights.vertices), T.mean(T.abs_(dv)))
    total = T.add(total, T.mul(Tensor(weights.joints3d), T.mean(T.square(dj))))
    return T.add(total, T.mul(Tensor(weights.joints2d), T.mean(T.square(dp))))


def loss_rotation(pred_rotations, true_rotations,
                  weights: LossWeights = LossWeights()) -> Tensor:
    """Entrywise L1 between rotation matrices, summed and scaled by w/H."""
    n = len(pred_rotations)
    if n == 0 or n != len(true_rotations):
        raise ValueError("need matching non-empty rotation lists")
    acc = None
    for pred, true in zip(pred_rotations, true_rotations):
        diff = T.sum_(T.abs_(T.sub(_as_tensor(pred), _as_tensor(true))))
        acc = diff if acc is None else T.add(acc, diff)
    return T.mul(Tensor(weights.rotations / n), acc)


def total_loss(pred_vertices, true_vertices, pred_joints, true_joints,
               pred_proj, true_proj, pred_rotations, true_rotations,
               weights: LossWeights = LossWeights()) -> Tensor:
    return T.add(
        loss_basic(pred_vertices, true_vertices, pred_joints, true_joints,
                   pred_proj, true_proj, weights),
        loss_rotation(pred_rotations, true_rotations, weights),
    )
