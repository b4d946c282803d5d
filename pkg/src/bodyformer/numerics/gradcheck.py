"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import tensor as T
from .geometry import rotation_from_6d
from .tensor import GradTape, Tensor

# Test hook: when set to an op name, that op's analytic gradient is perturbed
# inside the standard suite so the failure path can be exercised end to end.
CORRUPT_OP: str | None = None


def _sample_indices(n: int, max_components: int | None, rng) -> np.ndarray:
    if max_components is None or n <= max_components:
        return np.arange(n)
    rng = rng if rng is not None else np.random.default_rng(0)
    return rng.choice(n, size=max_components, replace=False)


def _relative_errors(
    f: Callable[[], Tensor],
    x: Tensor,
    analytic: np.ndarray,
    eps: float,
    indices: Iterable[int],
) -> float:
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in indices:
        keep = flat[i]
        flat[i] = keep + eps
        hi = f().item()
        flat[i] = keep - eps
        lo = f().item()
        flat[i] = keep
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        gap = abs(a - numeric)
        # Relative error with a floor, plus an absolute guard so that
        # identically-zero gradients are not drowned by roundoff noise in
        # the finite differences.
        err = 0.0 if gap < 1e-9 else gap / max(1e-8, abs(a) + abs(numeric))
        if err > worst:
            worst = err
    return worst


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    max_components: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape and central-difference gradients of f(x).

    ``f`` must return a scalar tensor.  Large inputs can be spot-checked by
    capping ``max_components``; the tape gradient is always computed in full.
    """
    x.requires_grad = True
    x.zero_grad()
    with GradTape() as tape:
        out = f(x)
        tape.backward(out)
    if x.grad is None:
        raise ValueError("f(x) does not depend on x")
    analytic = x.grad.copy()
    indices = _sample_indices(x.data.size, max_components, rng)
    return _relative_errors(lambda: f(x), x, analytic, eps, indices)


def grad_check_params(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_components: int | None = 4,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of a closure against every tensor in ``params``.

    One tape pass provides all analytic gradients; each parameter is then
    perturbed component-wise (spot-checked via ``max_components``).
    """
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    with GradTape() as tape:
        out = f()
        tape.backward(out)
    rng = rng if rng is not None else np.random.default_rng(0)
    report: dict[str, float] = {}
    for name, p in params.items():
        if p.grad is None:
            report[name] = float("nan")
            continue
        analytic = p.grad.copy()
        indices = _sample_indices(p.data.size, max_components, rng)
        report[name] = _relative_errors(f, p, analytic, eps, indices)
    return report


def _suite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, np.ndarray]]:
    """Scalar-valued probes for every differentiable op, keyed by op name."""
    m = rng.standard_normal((4, 5))
    grid = rng.standard_normal((6, 8, 3))
    pos = rng.uniform(0.5, 2.0, (4, 5))
    off = rng.uniform(0.5, 1.5, (4, 5)) * np.where(rng.random((4, 5)) < 0.5, -1.0, 1.0)
    vec6 = rng.standard_normal(6) + np.array([2.0, 0, 0, 0, 2.0, 0])
    coords = np.column_stack(
        [rng.uniform(0.2, 4.8, 7), rng.uniform(0.2, 6.8, 7)]
    )
    other = rng.standard_normal((5, 4))
    gain = rng.uniform(0.5, 1.5, 5)
    bias = rng.standard_normal(5)
    rot_target = rng.standard_normal((3, 3))

    def probe(op):
        return {
            "add": lambda x: T.sum_(T.square(T.add(x, other.T))),
            "sub": lambda x: T.sum_(T.square(T.sub(x, other.T))),
            "mul": lambda x: T.sum_(T.mul(x, other.T)),
            "div": lambda x: T.sum_(T.div(x, Tensor(pos))),
            "matmul": lambda x: T.sum_(T.square(T.matmul(x, Tensor(other)))),
            "transpose": lambda x: T.sum_(T.mul(T.transpose(x), Tensor(other))),
            "reshape": lambda x: T.sum_(T.square(T.reshape(x, (2, 10)))),
            "concat": lambda x: T.sum_(T.square(T.concat([x, x], axis=1))),
            "getitem": lambda x: T.sum_(T.square(x[1:3, ::2])),
            "sum": lambda x: T.square(T.sum_(x)),
            "mean": lambda x: T.square(T.mean(x)),
            "mean_axis": lambda x: T.sum_(T.square(T.mean(x, axis=0))),
            "abs": lambda x: T.sum_(T.abs_(x)),
            "square": lambda x: T.sum_(T.square(x)),
            "sqrt": lambda x: T.sum_(T.sqrt(x)),
            "exp": lambda x: T.sum_(T.exp(x)),
            "log": lambda x: T.sum_(T.log(x)),
            "tanh": lambda x: T.sum_(T.tanh(x)),
            "gelu": lambda x: T.sum_(T.gelu(x)),
            "softplus": lambda x: T.sum_(T.softplus(x)),
            "softmax": lambda x: T.sum_(T.square(T.softmax_rows(x)[0:1, :])),
            "layer_norm": lambda x: T.sum_(
                T.square(T.layer_norm(x, Tensor(gain), Tensor(bias)))
            ),
            "avg_pool2d": lambda x: T.sum_(T.square(T.avg_pool2d(x, 2))),
            "bilinear_patch": lambda x: T.sum_(T.square(T.bilinear_patch(x, coords))),
            "cross3": lambda x: T.sum_(T.square(T.cross3(x, Tensor([0.3, -1.1, 0.7])))),
            "rotation_from_6d": lambda x: T.sum_(
                T.mul(rotation_from_6d(x), Tensor(rot_target))
            ),
        }[op]

    inputs = {
        "div": m.copy(),
        "sqrt": pos.copy(),
        "log": pos.copy(),
        "abs": off.copy(),
        "avg_pool2d": grid.copy(),
        "bilinear_patch": grid.copy(),
        "cross3": rng.standard_normal(3),
        "rotation_from_6d": vec6,
    }
    ops = [
        "add", "sub", "mul", "div", "matmul", "transpose", "reshape", "concat",
        "getitem", "sum", "mean", "mean_axis", "abs", "square", "sqrt", "exp",
        "log", "tanh", "gelu", "softplus", "softmax", "layer_norm",
        "avg_pool2d", "bilinear_patch", "cross3", "rotation_from_6d",
    ]
    return {op: (probe(op), inputs.get(op, m.copy())) for op in ops}


def standard_op_checks(
    seed: int = 0, eps: float = 1e-5, max_components: int | None = None
) -> dict[str, float]:
    """Run ``grad_check`` over the full op set; returns op -> worst rel error."""
    rng = np.random.default_rng(seed)
    results = {}
    for op, (fn, data) in _suite_cases(rng).items():
        x = Tensor(data, requires_grad=True)
        err = grad_check(fn, x, eps=eps, max_components=max_components, rng=rng)
        if CORRUPT_OP == op:
            err += 1.0
        results[op] = err
    return results
