"""Rotation representations and similarity alignment.

Conventions: points are rows, so a rotation acts as ``points @ R`` and a
similarity as ``s * points @ R + t``.  ``Rotation`` validates orthonormality
and a +1 determinant at construction.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROTATION_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Input does not determine a well-posed answer."""


class Rotation:
    """A validated member of SO(3)."""

    __slots__ = ("matrix",)

    def __init__(self, matrix, tol: float = ROTATION_TOL):
        m = np.ascontiguousarray(matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {m.shape}")
        err = np.abs(m.T @ m - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"matrix is not orthonormal (deviation {err:.3e})")
        det = np.linalg.det(m)
        if abs(det - 1.0) > tol:
            raise ValueError(f"matrix determinant {det:.12f} is not +1")
        self.matrix = m

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    def as_array(self) -> np.ndarray:
        return self.matrix.copy()

    def __repr__(self) -> str:
        return f"Rotation({self.matrix.tolist()})"


def rotation_from_6d(six) -> Tensor:
    """Gram-Schmidt map from a 6-vector to a rotation matrix, differentiable.

    The first three numbers become the (normalized) first column, the second
    three are orthogonalized against it, and the third column is their cross
    product.  Raises ``DegenerateInputError`` when either column collapses.
    """
    six = six if isinstance(six, Tensor) else Tensor(six)
    if six.data.shape != (6,):
        raise ValueError("rotation_from_6d expects a 6-vector")
    a1_raw = six.data[:3]
    a2_raw = six.data[3:]
    n1 = np.linalg.norm(a1_raw)
    if n1 < 1e-8:
        raise DegenerateInputError("first 6d column has near-zero norm")
    b1_plain = a1_raw / n1
    residual = a2_raw - (a2_raw @ b1_plain) * b1_plain
    if np.linalg.norm(residual) < 1e-8:
        raise DegenerateInputError("6d columns are near-parallel")

    a1 = six[:3]
    a2 = six[3:]
    b1 = T.div(a1, T.sqrt(T.sum_(T.square(a1))))
    proj = T.sum_(T.mul(a2, b1))
    u2 = T.sub(a2, T.mul(proj, b1))
    b2 = T.div(u2, T.sqrt(T.sum_(T.square(u2))))
    b3 = T.cross3(b1, b2)
    cols = [T.reshape(b, (3, 1)) for b in (b1, b2, b3)]
    return T.concat(cols, axis=1)


def gram_schmidt_so3(six: np.ndarray, tol: float = ROTATION_TOL) -> Rotation:
    """Numpy shell around ``rotation_from_6d`` returning a validated Rotation."""
    return Rotation(rotation_from_6d(np.asarray(six, dtype=np.float64)).data, tol=tol)


def rodrigues_exp(axis_angle) -> Rotation:
    """Exponential map from an axis-angle 3-vector to a rotation.

    Below 1e-8 radians the sinc terms switch to their second-order Taylor
    expansions, keeping the map smooth through zero.
    """
    v = np.asarray(axis_angle, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError("rodrigues_exp expects a 3-vector")
    theta = np.linalg.norm(v)
    k = np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )
    if theta < 1e-8:
        # I + K + K^2/2, exact through O(theta^2).
        m = np.eye(3) + k + 0.5 * (k @ k)
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
        m = np.eye(3) + a * k + b * (k @ k)
    return Rotation(m)


def so3_log(rotation) -> np.ndarray:
    """Logarithm map: rotation matrix to axis-angle 3-vector.

    Dedicated branches cover angles near 0 (series for theta/sin(theta)) and
    near pi (axis recovered from the largest diagonal element, where the
    generic formula loses all precision).
    """
    m = rotation.matrix if isinstance(rotation, Rotation) else Rotation(rotation).matrix
    cos_theta = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vec = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    if theta < 1e-7:
        # vec = sin(theta) * axis; theta/sin(theta) = 1 + theta^2/6 + O(theta^4)
        return vec * (1.0 + theta * theta / 6.0)
    if theta > np.pi - 1e-6:
        # Near pi: R ~ 2*outer(axis, axis) - I, read the axis off the diagonal.
        b = (m + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(b)))
        axis = np.empty(3)
        axis[k] = np.sqrt(max(b[k, k], 0.0))
        for j in range(3):
            if j != k:
                axis[j] = b[j, k] / axis[k]
        axis /= np.linalg.norm(axis)
        # Fix the sign with the off-diagonal antisymmetric part when it survives.
        if vec @ axis < 0.0:
            axis = -axis
        return theta * axis
    return vec * (theta / np.sin(theta))


def procrustes_align(source: np.ndarray, target: np.ndarray):
    """Best-fit similarity: minimize sum ||s * source[i] @ R + t - target[i]||^2.

    Returns ``(s, Rotation, t)``.  Reflections are ruled out by flipping the
    sign of the last singular vector whenever the determinant would be -1.
    Raises ``DegenerateInputError`` for coincident or colinear source points.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 3:
        raise ValueError("procrustes_align expects matching (n>=3, 3) arrays")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    sing = np.linalg.svd(xc, compute_uv=False)
    if sing[0] < 1e-12 or sing[1] <= 1e-12 * max(1.0, sing[0]):
        raise DegenerateInputError("source points are coincident or colinear")
    # Maximize tr(R B) with B = yc^T xc over R in SO(3).
    b = yc.T @ xc
    u, s, vt = np.linalg.svd(b)
    d = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        d[2] = -1.0
    r = (vt.T * d) @ u.T
    scale = float((s * d).sum() / (xc * xc).sum())
    t = my - scale * mx @ r
    return scale, Rotation(r), t


def random_rotation(rng: np.random.Generator) -> Rotation:
    """Uniform-ish random rotation from a Gaussian 6-vector through Gram-Schmidt."""
    while True:
        six = rng.standard_normal(6)
        try:
            return gram_schmidt_so3(six)
        except DegenerateInputError:  # pragma: no cover - measure-zero retry
            continue
