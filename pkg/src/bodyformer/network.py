"""Hierarchical body regressor: pyramid encoder, refinement blocks, fusion.

The model keeps a running estimate P = (per-joint rotations, shape, camera)
and a target token matrix with one row per rotation plus a shape row and a
camera row.  Each block conditions the target on the current estimate, runs
its transformer units over the feature pyramid, and fuses the result into
parameter residuals: a 6-d rotation delta applied by left multiplication, a
shape delta, and a camera delta in pre-softplus space.  Residual heads start
at zero, so a freshly built model predicts its initial estimate unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import container
from .attention import (
    FeaturePyramid,
    flatten_grid,
    make_unit,
    pooled_positional_encodings,
    transformer_unit,
)
from .body import (
    BodyModel,
    SmplParams,
    body_fields,
    body_from_fields,
    lbs_mesh,
    project_weak_perspective,
    regress_joints,
    smpl_forward,
)
from .numerics import Rotation, Tensor, rotation_from_6d
from .numerics import tensor as T

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
CAMERA_RAW_INIT = np.array([math.log(math.e - 1.0), 0.0, 0.0])  # softplus -> 1

# Tags of the per-block joint projections computed since the last reset;
# exists so tests can confirm the window placement is refreshed exactly once
# per block.
_projection_log: list[str] = []


def reset_projection_log() -> None:
    _projection_log.clear()


def projection_log() -> tuple[str, ...]:
    return tuple(_projection_log)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape.  ``width`` is the token dimension."""

    blocks: int = 3
    units: int = 2
    heads: int = 4
    width: int = 64
    scales: int = 4
    window: int = 8
    n_joints: int = 24
    grid: int = 56
    image_size: int = 224

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must divide evenly into heads")
        if self.grid % 2 ** (self.scales - 1):
            raise ValueError(
                f"grid {self.grid} cannot halve {self.scales - 1} times"
            )
        if self.image_size % self.grid:
            raise ValueError("image size must be a multiple of the grid")
        if min(self.blocks, self.units, self.n_joints, self.window) < 1:
            raise ValueError("blocks, units, joints, and window must be positive")

    @property
    def target_rows(self) -> int:
        return self.n_joints + 2

    @property
    def flat_params(self) -> int:
        return self.n_joints * 9 + 10 + 3

    @classmethod
    def toy(cls) -> "ModelConfig":
        """Desk-scale config used by the trainer demo and heavy tests."""
        return cls(blocks=2, units=1, heads=2, width=16, scales=2, window=4,
                   grid=16, image_size=64)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Smallest legal config; used for end-to-end gradient checking."""
        return cls(blocks=1, units=1, heads=2, width=8, scales=2, window=2,
                   grid=8, image_size=32)

    def to_fields(self, prefix: str = "config/") -> dict[str, np.ndarray]:
        names = [f.name for f in dataclass_fields(ModelConfig)]
        return {prefix + n: np.array(getattr(self, n), dtype=np.int32) for n in names}

    @classmethod
    def from_fields(cls, fields, prefix: str = "config/") -> "ModelConfig":
        names = [f.name for f in dataclass_fields(ModelConfig)]
        return cls(**{n: int(fields[prefix + n]) for n in names})


class ToyBackbone:
    """Frozen random patch encoder producing the multi-scale feature grids.

    Not trained and not part of the parameter set; it exists to turn an
    image into a deterministic pyramid with the right shapes.
    """

    def __init__(self, config: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.config = config
        self.patch = config.image_size // config.grid
        d = config.width
        n_in = self.patch * self.patch
        lim = math.sqrt(3.0 / n_in)
        self.w_patch = rng.uniform(-lim, lim, (n_in, d))
        self.b_patch = rng.uniform(-0.1, 0.1, d)
        lim = math.sqrt(3.0 / (4 * d))
        self.w_down = [
            rng.uniform(-lim, lim, (4 * d, d)) for _ in range(config.scales - 1)
        ]

    def __call__(self, image: np.ndarray) -> list[np.ndarray]:
        cfg = self.config
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected a {cfg.image_size}x{cfg.image_size} image, got {image.shape}"
            )
        if not np.isfinite(image).all():
            raise ValueError("image contains non-finite values")
        g, p = cfg.grid, self.patch
        x = image.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g, g, p * p)
        level = np.tanh(x @ self.w_patch + self.b_patch)
        grids = [level]
        for w in self.w_down:
            h, ww, d = level.shape
            merged = (
                level.reshape(h // 2, 2, ww // 2, 2, d)
                .transpose(0, 2, 1, 3, 4)
                .reshape(h // 2, ww // 2, 4 * d)
            )
            level = np.tanh(merged @ w)
            grids.append(level)
        return grids


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, zero: bool = False):
        if zero:
            self.w = Tensor(np.zeros((n_in, n_out)), requires_grad=True)
        else:
            lim = math.sqrt(3.0 / n_in)
            self.w = Tensor(rng.uniform(-lim, lim, (n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def param_items(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


@dataclass
class FusionWeights:
    """Zero-initialized residual heads read off the target rows."""

    rot: Linear
    shape: Linear
    cam: Linear

    def param_items(self, prefix: str):
        return (self.rot.param_items(f"{prefix}.rot")
                + self.shape.param_items(f"{prefix}.shape")
                + self.cam.param_items(f"{prefix}.cam"))


@dataclass
class BlockWeights:
    units: list
    conditioner: Linear
    fusion: FusionWeights

    def param_items(self, prefix: str):
        items = []
        for u, unit in enumerate(self.units):
            items += unit.param_items(f"{prefix}.unit{u}")
        items += self.conditioner.param_items(f"{prefix}.conditioner")
        items += self.fusion.param_items(f"{prefix}.fusion")
        return items


@dataclass
class EstimateState:
    """Differentiable running estimate; camera scale lives pre-softplus."""

    rotations: list  # n_joints tensors, each (3, 3)
    beta: Tensor     # (10,)
    cam_raw: Tensor  # (3,)

    def camera(self) -> Tensor:
        return T.concat([T.softplus(self.cam_raw[0:1]), self.cam_raw[1:3]], axis=0)

    def to_params(self) -> SmplParams:
        cam = self.camera().data.copy()
        return SmplParams(
            rotations=[Rotation(r.data.copy()) for r in self.rotations],
            beta=self.beta.data.copy(),
            camera=cam,
        )


def flatten_state(state: EstimateState) -> Tensor:
    """Row vector (1, 9H+13): rotation entries, shape, materialized camera."""
    parts = [T.reshape(r, (1, 9)) for r in state.rotations]
    parts.append(T.reshape(state.beta, (1, 10)))
    parts.append(T.reshape(state.camera(), (1, 3)))
    return T.concat(parts, axis=1)


class ModelWeights:
    """Every learnable tensor plus the frozen backbone, body, and config."""

    def __init__(self, config: ModelConfig, body: BodyModel, seed: int,
                 zero_attention: bool = False):
        if body.n_joints != config.n_joints:
            raise ValueError("body joint count does not match the config")
        self.config = config
        self.body = body
        self.seed = seed
        self.zero_attention = zero_attention
        rng = np.random.default_rng(seed)
        d, rows = config.width, config.target_rows
        self.backbone = ToyBackbone(config, seed)

        self.phi_1 = Tensor(np.zeros((config.grid, config.grid, d)), requires_grad=True)
        self.eta_tilde = Tensor(
            np.zeros((config.window + 1, config.window + 1, 1)), requires_grad=True
        )
        self.target_pe = Tensor(np.zeros((rows, d)), requires_grad=True)
        self.init_hidden = Linear(d, d, rng)
        self.init_out = Linear(d, 6 * config.n_joints + 13, rng, zero=True)
        self.target_init = Linear(config.flat_params, rows * d, rng)
        self.blocks = []
        for _ in range(config.blocks):
            units = [
                make_unit(d, config.heads, config.scales, rng, zero_attention)
                for _ in range(config.units)
            ]
            conditioner = Linear(config.flat_params, rows * d, rng)
            fusion_w = FusionWeights(
                rot=Linear(d, 6, rng, zero=True),
                shape=Linear(d, 10, rng, zero=True),
                cam=Linear(d, 3, rng, zero=True),
            )
            self.blocks.append(BlockWeights(units, conditioner, fusion_w))

    def named_parameters(self) -> dict[str, Tensor]:
        items = [
            ("phi_1", self.phi_1),
            ("eta_tilde", self.eta_tilde),
            ("target_pe", self.target_pe),
        ]
        items += self.init_hidden.param_items("init_hidden")
        items += self.init_out.param_items("init_out")
        items += self.target_init.param_items("target_init")
        for b, block in enumerate(self.blocks):
            items += block.param_items(f"block{b}")
        return dict(items)


def build_model(config: ModelConfig, body: BodyModel, seed: int = 0,
                zero_attention: bool = False) -> ModelWeights:
    return ModelWeights(config, body, seed, zero_attention)


# ---------------------------------------------------------------------------
# forward pieces


def initial_estimate(model: ModelWeights, pooled_row: Tensor) -> EstimateState:
    """P0 from pooled features; residual head is zero-built, so a fresh
    model starts at identity rotations, zero shape, unit camera scale."""
    cfg = model.config
    hidden = T.gelu(model.init_hidden(pooled_row))
    head = model.init_out(hidden)  # (1, 6H+13)
    h6 = 6 * cfg.n_joints
    six = T.add(T.reshape(head[:, :h6], (cfg.n_joints, 6)), Tensor(IDENTITY_6D))
    rotations = [rotation_from_6d(six[i]) for i in range(cfg.n_joints)]
    beta = T.reshape(head[:, h6 : h6 + 10], (10,))
    cam_raw = T.add(T.reshape(head[:, h6 + 10 :], (3,)), Tensor(CAMERA_RAW_INIT))
    return EstimateState(rotations, beta, cam_raw)


def fuse(fusion: FusionWeights, target: Tensor, state: EstimateState,
         n_joints: int) -> EstimateState:
    """Apply residuals read from the target rows to the running estimate."""
    six = T.add(fusion.rot(target[:n_joints]), Tensor(IDENTITY_6D))
    rotations = [
        T.matmul(rotation_from_6d(six[i]), state.rotations[i])
        for i in range(n_joints)
    ]
    beta = T.add(state.beta, T.reshape(fusion.shape(target[n_joints : n_joints + 1]), (10,)))
    cam_raw = T.add(state.cam_raw, T.reshape(fusion.cam(target[n_joints + 1 : n_joints + 2]), (3,)))
    return EstimateState(rotations, beta, cam_raw)


def _detached_joints2d(body: BodyModel, state: EstimateState, tag: str) -> np.ndarray:
    """Current 2-d joints for window placement; plain numpy, off the tape."""
    params = state.to_params()
    mesh = smpl_forward(body, params)
    joints3 = regress_joints(body, mesh)
    _projection_log.append(tag)
    return project_weak_perspective(joints3, params.camera)


def transformer_block(model: ModelWeights, block: BlockWeights, state: EstimateState,
                      target: Tensor, pyramid: FeaturePyramid, phi_grids,
                      index: int = 0, tag=None,
                      window_joints: np.ndarray | None = None) -> tuple[EstimateState, Tensor]:
    cfg = model.config
    if window_joints is None:
        joints2 = _detached_joints2d(model.body, state, f"block{index}")
    else:
        joints2 = np.asarray(window_joints, dtype=np.float64)
    cond = T.reshape(block.conditioner(flatten_state(state)),
                     (cfg.target_rows, cfg.width))
    x = T.add(target, cond)
    for u, unit in enumerate(block.units):
        x = transformer_unit(
            x, pyramid, phi_grids, joints2, unit, model.eta_tilde,
            model.target_pe, cfg.window,
            tag=None if tag is None else f"{tag}/unit{u}",
        )
    return fuse(block.fusion, x, state, cfg.n_joints), x, joints2


@dataclass
class ForwardResult:
    """Final differentiable outputs plus the estimate after every block."""

    states: list            # EstimateState, length blocks+1 (index 0 = P0)
    snapshots: list         # SmplParams copies of the same trajectory
    mesh: Tensor            # (n, 3)
    joints3d: Tensor        # (H, 3)
    joints2d: Tensor        # (H, 2)
    target: Tensor          # final target rows
    window_placements: list  # (H, 2) array used for each block's windows

    @property
    def final(self) -> EstimateState:
        return self.states[-1]


def forward(model: ModelWeights, image: np.ndarray, tag: str | None = None,
            window_joints=None) -> ForwardResult:
    """Full pipeline: image to refined parameters and posed mesh.

    ``window_joints`` optionally pins each block's attention windows to
    given 2-d joints (a sequence of (H, 2) arrays, one per block) instead
    of projecting the running estimate.  Window placement carries no
    gradient either way; pinning it makes the whole map differentiable,
    which finite-difference checks rely on.
    """
    cfg = model.config
    if window_joints is not None and len(window_joints) != cfg.blocks:
        raise ValueError("window_joints needs one entry per block")
    grids = [Tensor(g) for g in model.backbone(image)]
    pyramid = FeaturePyramid(grids)
    phi_grids = pooled_positional_encodings(model.phi_1, cfg.scales)

    tokens = flatten_grid(grids[0])
    pooled = T.reshape(T.mean(tokens, axis=0), (1, cfg.width))
    state = initial_estimate(model, pooled)
    target = T.add(pooled, T.reshape(target_init_rows(model, state),
                                     (cfg.target_rows, cfg.width)))

    states = [state]
    snapshots = [state.to_params()]
    placements = []
    for b, block in enumerate(model.blocks):
        state, target, used = transformer_block(
            model, block, state, target, pyramid, phi_grids, index=b,
            tag=None if tag is None else f"{tag}/block{b}",
            window_joints=None if window_joints is None else window_joints[b],
        )
        states.append(state)
        snapshots.append(state.to_params())
        placements.append(used)

    mesh = lbs_mesh(model.body, state.rotations, state.beta)
    joints3 = regress_joints(model.body, mesh)
    joints2 = project_weak_perspective(joints3, state.camera())
    return ForwardResult(states, snapshots, mesh, joints3, joints2, target,
                         placements)


def target_init_rows(model: ModelWeights, state: EstimateState) -> Tensor:
    return model.target_init(flatten_state(state))


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, model: ModelWeights) -> None:
    fields: dict[str, np.ndarray] = {}
    fields.update(model.config.to_fields())
    fields["seed"] = np.array(model.seed, dtype=np.int32)
    fields["zero_attention"] = np.array(int(model.zero_attention), dtype=np.int32)
    fields.update(body_fields(model.body, prefix="body/"))
    for name, tensor in model.named_parameters().items():
        fields[f"param/{name}"] = tensor.data
    container.write(path, fields)


def load_checkpoint(path) -> ModelWeights:
    fields = container.read(path)
    config = ModelConfig.from_fields(fields)
    body = body_from_fields(fields, prefix="body/")
    seed = int(fields["seed"])
    zero_attention = bool(int(fields["zero_attention"]))
    model = build_model(config, body, seed=seed, zero_attention=zero_attention)
    params = model.named_parameters()
    for name, tensor in params.items():
        key = f"param/{name}"
        if key not in fields:
            raise container.ContainerParseError(f"checkpoint missing {key}")
        arr = fields[key]
        if arr.shape != tensor.data.shape:
            raise container.ContainerParseError(
                f"checkpoint field {key} has shape {arr.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data[...] = arr
    extra = [k for k in fields if k.startswith("param/") and k[6:] not in params]
    if extra:
        raise container.ContainerParseError(f"checkpoint has unknown fields {extra}")
    return model
