"""Rotation maps and similarity alignment against independent oracles."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation as ScipyRotation

from bodyformer.numerics import (
    DegenerateInputError,
    Rotation,
    Tensor,
    grad_check,
    gram_schmidt_so3,
    mul,
    procrustes_align,
    random_rotation,
    rodrigues_exp,
    rotation_from_6d,
    so3_log,
    sum_,
)

SEED = 911230


def rotz(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def test_rotation_validates():
    Rotation(np.eye(3))
    with pytest.raises(ValueError):
        Rotation(np.eye(3) * 1.001)
    with pytest.raises(ValueError):
        Rotation(np.diag([1.0, 1.0, -1.0]))


def test_gram_schmidt_identity_case():
    r = gram_schmidt_so3([1.0, 0, 0, 0, 1.0, 0])
    np.testing.assert_array_equal(r.matrix, np.eye(3))


def test_gram_schmidt_known_case():
    # Columns (e1, e3, e1 x e3 = -e2).
    r = gram_schmidt_so3([2.0, 0, 0, 0, 0, 3.0])
    want = np.array([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    np.testing.assert_allclose(r.matrix, want, atol=1e-15)


def test_gram_schmidt_property_sweep():
    print("seed", SEED)
    rng = np.random.default_rng(SEED)
    for _ in range(1000):
        r = gram_schmidt_so3(rng.standard_normal(6)).matrix
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9


def test_gram_schmidt_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        gram_schmidt_so3([0.0, 0, 0, 0, 1.0, 0])
    with pytest.raises(DegenerateInputError):
        gram_schmidt_so3([1.0, 0, 0, 2.0, 0, 0])


def test_rotation_from_6d_gradients():
    rng = np.random.default_rng(SEED + 1)
    target = rng.standard_normal((3, 3))
    x = Tensor(np.array([1.3, 0.2, -0.4, 0.1, 0.9, 0.5]), requires_grad=True)
    err = grad_check(lambda t: sum_(mul(rotation_from_6d(t), Tensor(target))), x)
    assert err < 1e-6


def test_rodrigues_zero_is_identity():
    np.testing.assert_array_equal(rodrigues_exp([0.0, 0.0, 0.0]).matrix, np.eye(3))


def test_rodrigues_z_quarter_turn():
    r = rodrigues_exp([0.0, 0.0, np.pi / 2]).matrix
    np.testing.assert_allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_rodrigues_taylor_branch_is_smooth():
    v = np.array([3e-9, -2e-9, 1e-9])
    r = rodrigues_exp(v).matrix
    assert np.abs(r - np.eye(3)).max() < 1e-8
    np.testing.assert_allclose(so3_log(r), v, atol=1e-16)


def test_log_exp_round_trip():
    rng = np.random.default_rng(SEED + 2)
    for _ in range(300):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.01, np.pi - 0.01)
        v = axis * angle
        np.testing.assert_allclose(so3_log(rodrigues_exp(v)), v, atol=1e-9)


def test_log_near_pi_branch():
    rng = np.random.default_rng(SEED + 3)
    for _ in range(50):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        v = axis * (np.pi - 1e-8)
        got = so3_log(rodrigues_exp(v))
        # Sign of the axis is ambiguous this close to pi.
        err = min(np.abs(got - v).max(), np.abs(got + v).max())
        assert err < 1e-6
        assert abs(np.linalg.norm(got) - (np.pi - 1e-8)) < 1e-6


def test_log_matches_quaternion_oracle():
    rng = np.random.default_rng(SEED + 4)
    for _ in range(200):
        r = random_rotation(rng).matrix
        want = ScipyRotation.from_matrix(r).as_rotvec()
        np.testing.assert_allclose(so3_log(r), want, atol=1e-9)


def test_procrustes_recovers_exact_similarity():
    rng = np.random.default_rng(SEED + 5)
    src = rng.standard_normal((10, 3))
    r = rotz(np.pi / 6)
    dst = 2.0 * src @ r + np.array([1.0, 2.0, 3.0])
    s, rot, t = procrustes_align(src, dst)
    assert abs(s - 2.0) < 1e-12
    np.testing.assert_allclose(rot.matrix, r, atol=1e-12)
    np.testing.assert_allclose(t, [1.0, 2.0, 3.0], atol=1e-10)
    residual = np.linalg.norm(s * src @ rot.matrix + t - dst, axis=1).max()
    assert residual < 1e-10


def test_procrustes_identity_on_equal_clouds():
    rng = np.random.default_rng(SEED + 6)
    src = rng.standard_normal((8, 3))
    s, rot, t = procrustes_align(src, src)
    assert abs(s - 1.0) < 1e-12
    np.testing.assert_allclose(rot.matrix, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t, np.zeros(3), atol=1e-12)


def _ssq(src, dst, s, r, t):
    diff = s * src @ r + t - dst
    return float((diff * diff).sum())


def _randomized_search_oracle(src, dst, rng, n_candidates=2000, descent_iters=120):
    """Best random similarity, refined by coordinate descent on the SSQ residual."""
    best = (1.0, np.eye(3), np.zeros(3))
    best_cost = _ssq(src, dst, *best)
    for _ in range(n_candidates):
        s = rng.uniform(0.2, 3.0)
        r = random_rotation(rng).matrix
        t = rng.uniform(-2, 2, 3)
        cost = _ssq(src, dst, s, r, t)
        if cost < best_cost:
            best_cost, best = cost, (s, r, t)
    s, r, t = best
    v = so3_log(r)
    params = np.concatenate([[s], v, t])
    step = 0.25
    while step > 1e-6:
        improved = False
        for i in range(7):
            for delta in (step, -step):
                trial = params.copy()
                trial[i] += delta
                cost = _ssq(
                    src, dst, trial[0], rodrigues_exp(trial[1:4]).matrix, trial[4:7]
                )
                if cost < best_cost:
                    best_cost, params, improved = cost, trial, True
        if not improved:
            step /= 2.0
    return best_cost


def test_procrustes_beats_randomized_search():
    rng = np.random.default_rng(SEED + 7)
    for _ in range(5):
        src = rng.standard_normal((12, 3))
        dst = 1.5 * src @ random_rotation(rng).matrix + rng.standard_normal(3)
        dst += rng.standard_normal(dst.shape) * 0.1
        s, rot, t = procrustes_align(src, dst)
        closed = _ssq(src, dst, s, rot.matrix, t)
        oracle = _randomized_search_oracle(src, dst, rng)
        assert closed <= oracle + 1e-9


def test_procrustes_residual_invariant_to_source_similarity():
    rng = np.random.default_rng(SEED + 8)
    src = rng.standard_normal((9, 3))
    dst = src @ random_rotation(rng).matrix + rng.standard_normal(src.shape) * 0.05

    def residual(a, b):
        s, rot, t = procrustes_align(a, b)
        return np.linalg.norm(s * a @ rot.matrix + t - b)

    base = residual(src, dst)
    warped = 3.7 * src @ random_rotation(rng).matrix + np.array([5.0, -2.0, 0.4])
    assert abs(residual(warped, dst) - base) < 1e-9


def test_procrustes_never_worse_than_no_alignment():
    rng = np.random.default_rng(SEED + 9)
    src = rng.standard_normal((15, 3))
    dst = src + rng.standard_normal(src.shape) * 0.3
    s, rot, t = procrustes_align(src, dst)
    aligned = np.linalg.norm(s * src @ rot.matrix + t - dst)
    assert aligned <= np.linalg.norm(src - dst) + 1e-12


def test_procrustes_rejects_colinear_source():
    line = np.outer(np.linspace(0, 1, 6), np.array([1.0, 2.0, 3.0]))
    with pytest.raises(DegenerateInputError):
        procrustes_align(line, line + 1.0)
