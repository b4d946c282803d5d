import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from bodyformer.metrics import mpjpe, mpre, mpve, pa_mpjpe
from bodyformer.numerics import random_rotation, rodrigues_exp

SEED = 990271


def test_mpjpe_known_value():
    a = np.zeros((4, 3))
    b = np.zeros((4, 3))
    b[0] = (3.0, 4.0, 0.0)  # distance 5 on one joint out of four
    assert abs(mpjpe(a, b) - 1.25) < 1e-15
    assert mpjpe(a, a) == 0.0


def test_mpjpe_validates_shapes():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        mpjpe(np.zeros((4, 3)), np.zeros((5, 3)))


def test_mpve_matches_mpjpe_on_points():
    rng = np.random.default_rng(SEED)
    a, b = rng.standard_normal((50, 3)), rng.standard_normal((50, 3))
    assert mpve(a, b) == mpjpe(a, b)


def test_pa_mpjpe_resolves_similarity_exactly():
    rng = np.random.default_rng(SEED + 1)
    for _ in range(10):
        cloud = rng.standard_normal((24, 3))
        rot = random_rotation(rng).matrix
        s = float(rng.uniform(0.3, 3.0))
        t = rng.standard_normal(3)
        moved = s * cloud @ rot.T + t
        raw = mpjpe(moved, cloud)
        assert raw > 1e-2  # the transform genuinely displaced the cloud
        assert pa_mpjpe(moved, cloud) < 1e-10


def test_pa_mpjpe_leaves_only_the_noise():
    rng = np.random.default_rng(SEED + 2)
    cloud = rng.standard_normal((24, 3))
    noise = 1e-3 * rng.standard_normal((24, 3))
    moved = 2.0 * (cloud + noise) @ random_rotation(rng).matrix.T + 5.0
    assert pa_mpjpe(moved, cloud) < 10e-3
    assert pa_mpjpe(moved, cloud) < mpjpe(moved, cloud) / 100


def test_mpre_zero_for_equal_rotations():
    rng = np.random.default_rng(SEED + 3)
    rots = [random_rotation(rng).matrix for _ in range(24)]
    # arccos is ill-conditioned at zero angle: trace roundoff of ~1e-16
    # surfaces as ~1e-7 degrees, so exact zero is not achievable here.
    assert mpre(rots, rots) < 1e-5


def test_mpre_matches_quaternion_oracle():
    rng = np.random.default_rng(SEED + 4)
    preds = [random_rotation(rng).matrix for _ in range(200)]
    trues = [random_rotation(rng).matrix for _ in range(200)]
    got = mpre(preds, trues)
    angles = [
        ScipyRotation.from_matrix(t @ p.T).magnitude()
        for p, t in zip(preds, trues)
    ]
    want = np.degrees(np.mean(angles))
    assert abs(got - want) < 1e-9


def test_mpre_quarter_turn_everywhere():
    rng = np.random.default_rng(SEED + 5)
    trues = [random_rotation(rng).matrix for _ in range(24)]
    preds = []
    for t in trues:
        axis = rng.standard_normal(3)
        axis *= (np.pi / 2) / np.linalg.norm(axis)
        preds.append(rodrigues_exp(axis).matrix @ t)
    assert abs(mpre(preds, trues) - 90.0) < 1e-9


def test_mpre_accepts_rotation_objects():
    rng = np.random.default_rng(SEED + 6)
    rots = [random_rotation(rng) for _ in range(5)]
    assert mpre(rots, [r.matrix for r in rots]) < 1e-5


def test_rigid_motion_moves_both_sets_identically():
    rng = np.random.default_rng(SEED + 7)
    a, b = rng.standard_normal((24, 3)), rng.standard_normal((24, 3))
    rot = random_rotation(rng).matrix
    t = rng.standard_normal(3)
    before = mpjpe(a, b)
    after = mpjpe(a @ rot.T + t, b @ rot.T + t)
    assert abs(before - after) < 1e-12
