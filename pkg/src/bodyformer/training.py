"""Adaptive-moment optimizer, synthetic supervision, and the overfit loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import (
    BodyModel,
    SmplParams,
    project_weak_perspective,
    regress_joints,
    smpl_forward,
)
from .losses import LossWeights, total_loss
from .metrics import mpjpe, mpre
from .network import ModelWeights, forward
from .numerics import GradTape, Tensor, rodrigues_exp
from .numerics import tensor as T
from .numerics.tensor import NumericError


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale1 = 1.0 - b1 ** self.t
        scale2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / scale1) / (np.sqrt(v / scale2) + self.eps)


@dataclass
class Sample:
    """One supervised example: an image plus everything the loss compares."""

    image: np.ndarray      # (s, s)
    params: SmplParams
    mesh: np.ndarray       # (n, 3)
    joints3d: np.ndarray   # (H, 3)
    joints2d: np.ndarray   # (H, 2)


def render_joint_map(joints2d: np.ndarray, size: int, sigma: float = 0.06) -> np.ndarray:
    """Splat 2-d joints as Gaussian blobs on a ``size`` x ``size`` canvas.

    Coordinates live in [-1, 1]^2; the blob width is in the same units.
    Gives the backbone a deterministic image that actually depends on pose.
    """
    axis = np.linspace(-1.0, 1.0, size)
    cols, rows = np.meshgrid(axis, axis)
    canvas = np.zeros((size, size))
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in np.asarray(joints2d, dtype=np.float64):
        canvas += np.exp(-((rows - y) ** 2 + (cols - x) ** 2) * inv)
    return canvas


def make_synthetic_samples(body: BodyModel, image_size: int, count: int,
                           seed: int, max_angle: float = 0.35) -> list[Sample]:
    """Random moderately-posed bodies with exact targets derived from them."""
    if count < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count):
        rotations = []
        for _ in range(body.n_joints):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.4, 1.0) * max_angle
            rotations.append(rodrigues_exp(axis * angle))
        beta = rng.normal(scale=0.3, size=10)
        camera = np.array([
            float(np.exp(rng.uniform(-0.1, 0.1))),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.1, 0.1),
        ])
        params = SmplParams(rotations=rotations, beta=beta, camera=camera)
        mesh = smpl_forward(body, params)
        joints3 = regress_joints(body, mesh)
        joints2 = project_weak_perspective(joints3, camera)
        image = render_joint_map(joints2, image_size)
        samples.append(Sample(image, params, mesh, joints3, joints2))
    return samples


def sample_loss(result, sample: Sample, weights: LossWeights = LossWeights()) -> Tensor:
    state = result.final
    return total_loss(
        result.mesh, sample.mesh,
        result.joints3d, sample.joints3d,
        result.joints2d, sample.joints2d,
        state.rotations, [r.matrix for r in sample.params.rotations],
        weights,
    )


def evaluate_metrics(model: ModelWeights, samples: list[Sample]) -> dict[str, float]:
    """Mean joint error and rotation error of the final estimate."""
    pjs, prs = [], []
    for sample in samples:
        res = forward(model, sample.image)
        pjs.append(mpjpe(res.joints3d.data, sample.joints3d))
        prs.append(mpre(res.final.to_params().rotations, sample.params.rotations))
    return {"mpjpe": float(np.mean(pjs)), "mpre": float(np.mean(prs))}


@dataclass
class TrainResult:
    losses: np.ndarray            # steps + 1 entries; [0] is pre-update
    metrics_initial: dict
    metrics_final: dict


def train_overfit(model: ModelWeights, samples: list[Sample], steps: int = 300,
                  lr: float = 1e-3, weights: LossWeights = LossWeights()) -> TrainResult:
    """Fit the model to a handful of samples; returns the full loss curve.

    Deterministic: same model, samples, and step count give the same curve.
    """
    if not samples:
        raise ValueError("need at least one sample")
    params = model.named_parameters()
    opt = Adam(params, lr=lr)
    metrics_initial = evaluate_metrics(model, samples)
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        try:
            with GradTape() as tape:
                acc = None
                for sample in samples:
                    term = sample_loss(forward(model, sample.image), sample, weights)
                    acc = term if acc is None else T.add(acc, term)
                loss = T.mul(Tensor(1.0 / len(samples)), acc)
                tape.backward(loss)
        except NumericError as exc:
            raise DivergenceError(
                f"non-finite value at step {len(losses)}: {exc}"
            ) from exc
        value = loss.data.item()
        if not np.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {len(losses)}")
        losses.append(value)
        opt.step()
    # closing evaluation so the curve has steps + 1 points
    final = 0.0
    for sample in samples:
        final += sample_loss(forward(model, sample.image), sample, weights).data.item()
    losses.append(final / len(samples))
    metrics_final = evaluate_metrics(model, samples)
    return TrainResult(np.asarray(losses), metrics_initial, metrics_final)
