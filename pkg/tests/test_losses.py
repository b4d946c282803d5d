import numpy as np
import pytest

from bodyformer.losses import LossWeights, loss_basic, loss_rotation, total_loss
from bodyformer.numerics import Tensor, grad_check
from bodyformer.numerics import tensor as T

SEED = 240519


def test_default_weights():
    w = LossWeights()
    assert (w.vertices, w.joints3d, w.joints2d, w.rotations) == (100.0, 1000.0, 100.0, 50.0)


def test_zero_residual_gives_zero_loss():
    rng = np.random.default_rng(SEED)
    mesh = rng.standard_normal((30, 3))
    joints = rng.standard_normal((24, 3))
    proj = rng.standard_normal((24, 2))
    out = loss_basic(mesh, mesh, joints, joints, proj, proj)
    assert out.item() == 0.0


def test_each_term_weighted_as_documented():
    mesh = np.zeros((10, 3))
    joints = np.zeros((24, 3))
    proj = np.zeros((24, 2))
    # Constant offsets make the means exact: 100*0.1 + 1000*0.04 + 100*0.25.
    out = loss_basic(mesh + 0.1, mesh, joints + 0.2, joints, proj + 0.5, proj)
    assert abs(out.item() - (10.0 + 40.0 + 25.0)) < 1e-12


def test_rotation_loss_quarter_turn_single_joint():
    rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    preds = [np.eye(3)] * 24
    trues = [np.eye(3)] * 24
    preds = [rz90] + preds[1:]
    out = loss_rotation(preds, trues)
    # One joint off by a quarter turn: entrywise L1 of the difference is 4,
    # scaled by 50/24.
    assert abs(out.item() - 50.0 * 4.0 / 24.0) < 1e-12
    assert abs(out.item() - 8.333333333333334) < 1e-12


def test_rotation_loss_quarter_turn_everywhere():
    rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = loss_rotation([rz90] * 24, [np.eye(3)] * 24)
    assert abs(out.item() - 200.0) < 1e-12


def test_rotation_loss_validates():
    with pytest.raises(ValueError):
        loss_rotation([], [])
    with pytest.raises(ValueError):
        loss_rotation([np.eye(3)], [np.eye(3), np.eye(3)])


def test_total_is_sum_of_parts():
    rng = np.random.default_rng(SEED + 1)
    mesh_p, mesh_t = rng.standard_normal((12, 3)), rng.standard_normal((12, 3))
    j_p, j_t = rng.standard_normal((24, 3)), rng.standard_normal((24, 3))
    pr_p, pr_t = rng.standard_normal((24, 2)), rng.standard_normal((24, 2))
    rot_p = [np.eye(3)] * 24
    rot_t = [np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])] * 24
    whole = total_loss(mesh_p, mesh_t, j_p, j_t, pr_p, pr_t, rot_p, rot_t)
    parts = (loss_basic(mesh_p, mesh_t, j_p, j_t, pr_p, pr_t).item()
             + loss_rotation(rot_p, rot_t).item())
    assert abs(whole.item() - parts) < 1e-12


def test_loss_gradients():
    rng = np.random.default_rng(SEED + 2)
    mesh_t = rng.standard_normal((8, 3))
    j_t = rng.standard_normal((24, 3))
    pr_t = rng.standard_normal((24, 2))

    def f(mesh_p):
        joints = T.matmul(Tensor(np.full((24, 8), 1.0 / 8)), mesh_p)
        proj = joints[:, 0:2]
        return loss_basic(mesh_p, mesh_t, joints, j_t, proj, pr_t)

    # Offset keeps every L1 residual away from its kink.
    start = mesh_t + rng.uniform(0.3, 0.8, (8, 3)) * np.where(
        rng.random((8, 3)) < 0.5, -1.0, 1.0
    )
    assert grad_check(f, Tensor(start, requires_grad=True), rng=rng) < 1e-4


def test_rotation_loss_gradient():
    rng = np.random.default_rng(SEED + 3)
    trues = [np.eye(3) for _ in range(4)]

    def f(stack):
        preds = [stack[i] for i in range(4)]
        return loss_rotation(preds, trues, LossWeights(rotations=50.0))

    start = np.stack(trues) + 0.3 + 0.1 * rng.standard_normal((4, 3, 3))
    assert grad_check(f, Tensor(start, requires_grad=True), max_components=10,
                      rng=rng) < 1e-4
