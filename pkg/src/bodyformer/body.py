"""SMPL-style parametric body: shape blendshapes + linear blend skinning.

The mesh lives in meters, points stored as rows.  Pose is one rotation per
joint of a 24-joint kinematic tree rooted at the pelvis (joint 0); shape is
a 10-coefficient blendshape vector; the camera is weak-perspective
``(s, tx, ty)`` mapping ``J -> s * (J.xy + t)`` in normalized [-1, 1]
image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import container
from .numerics import Rotation, Tensor
from .numerics import tensor as T

N_JOINTS = 24
N_SHAPE = 10

# Parent of each joint; -1 marks the pelvis root.  Standard 24-joint rig:
# legs (1,2,4,5,7,8,10,11), spine chain (3,6,9,12,15), collars/arms
# (13,14,16..23).  Every parent index precedes its children.
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)


class InvariantError(ValueError):
    """A named model invariant does not hold."""


@dataclass
class BodyModel:
    """Template mesh, shape basis, joint regressor, skinning weights, tree."""

    template: np.ndarray       # (n, 3)
    shape_basis: np.ndarray    # (n, 3, 10)
    joint_regressor: np.ndarray  # (H, n), rows sum to 1
    skin_weights: np.ndarray   # (n, H), rows sum to 1
    parents: np.ndarray        # (H,) int32, parents[0] == -1

    def __post_init__(self):
        self.template = np.ascontiguousarray(self.template, dtype=np.float64)
        self.shape_basis = np.ascontiguousarray(self.shape_basis, dtype=np.float64)
        self.joint_regressor = np.ascontiguousarray(self.joint_regressor, dtype=np.float64)
        self.skin_weights = np.ascontiguousarray(self.skin_weights, dtype=np.float64)
        self.parents = np.ascontiguousarray(self.parents, dtype=np.int32)
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    def validate(self) -> None:
        n = self.template.shape[0]
        h = self.parents.shape[0]
        if self.template.shape != (n, 3):
            raise InvariantError("template must be (n, 3)")
        if self.shape_basis.shape != (n, 3, N_SHAPE):
            raise InvariantError(f"shape_basis must be (n, 3, {N_SHAPE})")
        if self.joint_regressor.shape != (h, n):
            raise InvariantError("joint_regressor must be (H, n)")
        if self.skin_weights.shape != (n, h):
            raise InvariantError("skin_weights must be (n, H)")
        if np.any(self.joint_regressor < 0) or np.any(self.skin_weights < 0):
            raise InvariantError("regressor and skin weights must be nonnegative")
        reg_sums = self.joint_regressor.sum(axis=1)
        if np.abs(reg_sums - 1.0).max() > 1e-6:
            raise InvariantError("joint_regressor rows must sum to 1 within 1e-6")
        skin_sums = self.skin_weights.sum(axis=1)
        if np.abs(skin_sums - 1.0).max() > 1e-6:
            raise InvariantError("skin_weights rows must sum to 1 within 1e-6")
        if self.parents[0] != -1:
            raise InvariantError("joint 0 must be the root (parent -1)")
        for i in range(1, h):
            p = int(self.parents[i])
            if not 0 <= p < h:
                raise InvariantError(f"joint {i} has parent {p} outside the tree")
            # Walk to the root; a cycle would never terminate within h steps.
            seen = 0
            while p != -1:
                p = int(self.parents[p])
                seen += 1
                if seen > h:
                    raise InvariantError(f"kinematic tree has a cycle through joint {i}")

    def rest_joints(self, beta: np.ndarray | None = None) -> np.ndarray:
        shaped = self.template if beta is None else shape_mesh(self, beta)
        return self.joint_regressor @ shaped


@dataclass
class SmplParams:
    """One body estimate: per-joint rotations, shape, weak-perspective camera."""

    rotations: list[Rotation]
    beta: np.ndarray
    camera: np.ndarray  # (s, tx, ty), s > 0

    def __post_init__(self):
        self.beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        self.camera = np.ascontiguousarray(self.camera, dtype=np.float64)
        if self.beta.shape != (N_SHAPE,):
            raise ValueError(f"beta must have shape ({N_SHAPE},)")
        if self.camera.shape != (3,):
            raise ValueError("camera must be (s, tx, ty)")
        if not self.camera[0] > 0:
            raise ValueError("camera scale must be positive")

    @classmethod
    def rest(cls, n_joints: int = N_JOINTS) -> "SmplParams":
        return cls(
            rotations=[Rotation.identity() for _ in range(n_joints)],
            beta=np.zeros(N_SHAPE),
            camera=np.array([1.0, 0.0, 0.0]),
        )

    def rotation_stack(self) -> np.ndarray:
        return np.stack([r.matrix for r in self.rotations])


def shape_mesh(model: BodyModel, beta: np.ndarray) -> np.ndarray:
    """Template plus shape blendshape displacements (numpy path)."""
    beta = np.asarray(beta, dtype=np.float64)
    return model.template + model.shape_basis @ beta


def lbs_mesh(model: BodyModel, rotations: Sequence, beta) -> Tensor:
    """Differentiable LBS forward: rotations (H tensors, 3x3) and beta to mesh.

    Skinning is computed as shaped-vertices plus weighted per-bone
    displacements, which reproduces the template bitwise at the rest pose.
    """
    h = model.n_joints
    n = model.n_vertices
    if len(rotations) != h:
        raise ValueError(f"expected {h} rotations, got {len(rotations)}")
    rots = [r if isinstance(r, Tensor) else Tensor(r) for r in rotations]
    beta_t = beta if isinstance(beta, Tensor) else Tensor(beta)
    if beta_t.data.shape != (N_SHAPE,):
        raise ValueError(f"beta must have shape ({N_SHAPE},)")

    basis = Tensor(model.shape_basis.reshape(n * 3, N_SHAPE))
    offsets = T.reshape(T.matmul(basis, T.reshape(beta_t, (N_SHAPE, 1))), (n, 3))
    shaped = T.add(Tensor(model.template), offsets)
    rest = T.matmul(Tensor(model.joint_regressor), shaped)  # (H, 3)

    # World transform per joint: G_i maps rest space to posed space, rows act
    # as x @ R^T + t.  Local rotation is about the joint's own rest position.
    world_rot: list[Tensor] = [None] * h
    world_t: list[Tensor] = [None] * h
    for i in range(h):
        ri = rots[i]
        ji = rest[i : i + 1]  # (1, 3)
        spin = T.sub(ji, T.matmul(ji, T.transpose(ri)))  # j - j @ R^T
        p = int(model.parents[i])
        if p < 0:
            world_rot[i] = ri
            world_t[i] = spin
        else:
            world_rot[i] = T.matmul(world_rot[p], ri)
            world_t[i] = T.add(T.matmul(spin, T.transpose(world_rot[p])), world_t[p])

    mesh = shaped
    for i in range(h):
        posed = T.add(T.matmul(shaped, T.transpose(world_rot[i])), world_t[i])
        displacement = T.sub(posed, shaped)
        weight = Tensor(model.skin_weights[:, i : i + 1])
        mesh = T.add(mesh, T.mul(weight, displacement))
    return mesh


def smpl_forward(model: BodyModel, params: SmplParams) -> np.ndarray:
    """Posed mesh vertices for validated parameters (numpy in, numpy out)."""
    if len(params.rotations) != model.n_joints:
        raise ValueError("rotation count does not match the model's joints")
    rots = [r.matrix for r in params.rotations]
    return lbs_mesh(model, rots, params.beta).data


def regress_joints(model: BodyModel, mesh) -> np.ndarray | Tensor:
    """3-d joints as the regressor-weighted vertex average; J = M @ mesh."""
    if isinstance(mesh, Tensor):
        return T.matmul(Tensor(model.joint_regressor), mesh)
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.shape != (model.n_vertices, 3):
        raise ValueError("mesh shape does not match the model")
    return model.joint_regressor @ mesh


def project_weak_perspective(joints, camera) -> np.ndarray | Tensor:
    """2-d projection s * (J.xy + (tx, ty)); accepts tensors or arrays."""
    if isinstance(joints, Tensor) or isinstance(camera, Tensor):
        joints_t = joints if isinstance(joints, Tensor) else Tensor(joints)
        camera_t = camera if isinstance(camera, Tensor) else Tensor(camera)
        xy = joints_t[:, 0:2]
        shift = T.add(xy, T.reshape(camera_t[1:3], (1, 2)))
        return T.mul(camera_t[0:1], shift)
    joints = np.asarray(joints, dtype=np.float64)
    camera = np.asarray(camera, dtype=np.float64)
    return camera[0] * (joints[:, :2] + camera[1:3])


# ---------------------------------------------------------------------------
# Toy model synthesis

# Rest skeleton for the toy body (meters, y up, T pose), pelvis at the origin.
_REST_JOINTS = np.array(
    [
        [0.00, 0.00, 0.00],   # pelvis
        [0.09, -0.06, 0.00],  # left hip
        [-0.09, -0.06, 0.00], # right hip
        [0.00, 0.11, 0.00],   # spine1
        [0.10, -0.46, 0.00],  # left knee
        [-0.10, -0.46, 0.00], # right knee
        [0.00, 0.24, 0.00],   # spine2
        [0.11, -0.85, 0.00],  # left ankle
        [-0.11, -0.85, 0.00], # right ankle
        [0.00, 0.34, 0.00],   # spine3
        [0.12, -0.92, 0.12],  # left foot
        [-0.12, -0.92, 0.12], # right foot
        [0.00, 0.47, 0.00],   # neck
        [0.07, 0.42, 0.00],   # left collar
        [-0.07, 0.42, 0.00],  # right collar
        [0.00, 0.58, 0.00],   # head
        [0.17, 0.44, 0.00],   # left shoulder
        [-0.17, 0.44, 0.00],  # right shoulder
        [0.42, 0.44, 0.00],   # left elbow
        [-0.42, 0.44, 0.00],  # right elbow
        [0.67, 0.44, 0.00],   # left wrist
        [-0.67, 0.44, 0.00],  # right wrist
        [0.75, 0.44, 0.00],   # left hand
        [-0.75, 0.44, 0.00],  # right hand
    ]
)


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to segment ab."""
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def synthesize_toy_model(seed: int, n_vertices: int = 600) -> BodyModel:
    """Deterministic stick-figure body for tests and the desk-scale trainer.

    Vertices are scattered along the bones of a fixed T-pose skeleton; the
    joint regressor concentrates on near-joint vertices and the skinning
    weights fall off with distance to each bone.
    """
    if n_vertices < N_JOINTS:
        raise ValueError(f"need at least {N_JOINTS} vertices, got {n_vertices}")
    rng = np.random.default_rng(seed)
    bones = [(int(PARENTS[i]), i) for i in range(1, N_JOINTS)]

    verts = np.empty((n_vertices, 3))
    for v in range(n_vertices):
        p, c = bones[v % len(bones)]
        u = rng.uniform(0.15, 0.85)
        point = (1 - u) * _REST_JOINTS[p] + u * _REST_JOINTS[c]
        verts[v] = point + rng.normal(0.0, 0.035, 3)

    # Joint regressor: soft nearest-vertex weighting around each design joint.
    d_joint = np.linalg.norm(
        verts[None, :, :] - _REST_JOINTS[:, None, :], axis=2
    )  # (H, n)
    reg = np.exp(-(d_joint**2) / (2 * 0.05**2)) + 1e-9
    reg /= reg.sum(axis=1, keepdims=True)

    # Skinning weights fall off with distance to each joint's bone, measured
    # against the joints the regressor actually produces.
    actual = reg @ verts
    d_bone = np.empty((n_vertices, N_JOINTS))
    d_bone[:, 0] = np.linalg.norm(verts - actual[0], axis=1)
    for p, c in bones:
        d_bone[:, c] = _segment_distances(verts, actual[p], actual[c])
    skin = np.exp(-(d_bone**2) / (2 * 0.08**2)) + 1e-9
    skin /= skin.sum(axis=1, keepdims=True)

    # Shape basis: ten smooth random displacement fields (sums of radial bumps).
    basis = np.zeros((n_vertices, 3, N_SHAPE))
    for k in range(N_SHAPE):
        for _ in range(6):
            center = rng.uniform(-0.9, 0.9, 3)
            amp = rng.normal(0.0, 0.02, 3)
            fall = np.exp(
                -np.linalg.norm(verts - center, axis=1) ** 2 / (2 * 0.15**2)
            )
            basis[:, :, k] += fall[:, None] * amp

    return BodyModel(
        template=verts,
        shape_basis=basis,
        joint_regressor=reg,
        skin_weights=skin,
        parents=np.array(PARENTS, dtype=np.int32),
    )


# ---------------------------------------------------------------------------
# Persistence

_FIELDS = ("template", "shape_basis", "joint_regressor", "skin_weights", "parents")


def body_fields(model: BodyModel, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + name: getattr(model, name) for name in _FIELDS}


def body_from_fields(fields: dict[str, np.ndarray], prefix: str = "") -> BodyModel:
    missing = [name for name in _FIELDS if prefix + name not in fields]
    if missing:
        raise container.ContainerParseError(f"missing body fields: {missing}")
    return BodyModel(**{name: fields[prefix + name] for name in _FIELDS})


def save_model(path, model: BodyModel) -> None:
    container.write(path, body_fields(model))


def save_model_json(path, model: BodyModel) -> None:
    container.write_json(path, body_fields(model))


def load_model(path) -> BodyModel:
    """Read and validate a body model; invalid invariants raise InvariantError."""
    return body_from_fields(container.read(path))
