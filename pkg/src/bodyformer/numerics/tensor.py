"""Dense float64 tensors with a reverse-mode gradient tape and cost accounting.

Everything downstream (body model, attention, trainer) is built from the
fixed op set in this module.  Ops record onto the thread's active
``GradTape`` when one exists and any input requires a gradient; outside a
tape they are plain numpy calls.  A ``CostCollector`` made active via
``cost_scope`` observes matmul/softmax FLOPs (fused multiply-add = 1 flop,
softmax exp/div = 4 flops per element) and tracks a live-bytes high-water
mark through tensor allocation hooks.
"""

from __future__ import annotations

import math
import threading
import weakref
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

# Module-wide switch for post-op finiteness validation.
FINITE_CHECKS = True


class NumericError(ValueError):
    """A value left the representable/finite domain."""


class _ThreadState(threading.local):
    def __init__(self):
        self.tape = None
        self.collector = None


_STATE = _ThreadState()


def _check_finite(arr: np.ndarray, what: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A dense, row-major float64 array, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        collector = _STATE.collector
        if collector is not None:
            collector._on_alloc(arr.nbytes)
            weakref.finalize(self, collector._on_free, arr.nbytes)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; the named functions below do the work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of tensor ops for one forward pass.

    Creation order is a topological order of the graph, so the backward
    pass is a single reverse sweep that visits each node exactly once.
    A tape is confined to the thread that opened it.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        if _STATE.tape is not None:
            raise RuntimeError("a GradTape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(leaf) into ``.grad`` of every tracked tensor."""
        if output.data.size != 1:
            raise ValueError("backward requires a scalar output")
        if output.grad is None:
            output.grad = np.ones_like(output.data)
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib
        _check_finite(output.grad, "backward seed")


def _result(arr: np.ndarray, parents: Sequence[tuple], what: str) -> Tensor:
    """Wrap an op output; register on the active tape when grads are needed."""
    _check_finite(np.asarray(arr), what)
    out = Tensor(arr)
    tape = _STATE.tape
    if tape is not None:
        kept = tuple((p, fn) for p, fn in parents if p.requires_grad)
        if kept:
            out.requires_grad = True
            out._parents = kept
            tape._nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# Cost accounting


class CostCollector:
    """Accumulates FLOPs, key-vector touches, and a live-bytes high-water mark.

    Only matmul and softmax report FLOPs (the stated accounting convention);
    ``scope("interaction")`` additionally funnels those FLOPs into the
    pairwise-interaction bucket used by the scaling fits.
    """

    def __init__(self):
        self.flops = 0
        self.interaction_flops = 0
        self.key_vectors = 0
        self.key_bytes = 0
        self.current_bytes = 0
        self.peak_bytes = 0
        self._category = None

    def add_flops(self, n: int) -> None:
        self.flops += n
        if self._category == "interaction":
            self.interaction_flops += n

    def add_keys(self, vectors: int, bytes_: int) -> None:
        self.key_vectors += vectors
        self.key_bytes += bytes_

    @contextmanager
    def scope(self, category: str):
        previous = self._category
        self._category = category
        try:
            yield
        finally:
            self._category = previous

    def _on_alloc(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def _on_free(self, nbytes: int) -> None:
        self.current_bytes -= nbytes


@contextmanager
def cost_scope(collector: CostCollector):
    """Make ``collector`` the thread's active cost observer."""
    if _STATE.collector is not None:
        raise RuntimeError("a CostCollector is already active on this thread")
    _STATE.collector = collector
    try:
        yield collector
    finally:
        _STATE.collector = None


def _count_flops(n: int) -> None:
    c = _STATE.collector
    if c is not None:
        c.add_flops(n)


def active_collector() -> CostCollector | None:
    return _STATE.collector


# ---------------------------------------------------------------------------
# Broadcasting helper


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _result(
        out,
        (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ),
        "add",
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, ((a, lambda g: -g),), "neg")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _result(
        out,
        (
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _result(
        out,
        (
            (a, lambda g: _unbroadcast(g * bd, ad.shape)),
            (b, lambda g: _unbroadcast(g * ad, bd.shape)),
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (
            (a, lambda g: _unbroadcast(g / bd, ad.shape)),
            (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        ),
        "div",
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    _count_flops(ad.shape[0] * ad.shape[1] * bd.shape[1])
    out = ad @ bd
    return _result(
        out,
        (
            (a, lambda g: g @ bd.T),
            (b, lambda g: ad.T @ g),
        ),
        "matmul",
    )


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    return _result(a.data.T, ((a, lambda g: g.T),), "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _result(a.data.reshape(shape), ((a, lambda g: g.reshape(old)),), "reshape")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ValueError("concat of an empty sequence")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = bounds[i], bounds[i + 1]

        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _result(out, tuple((t, make_vjp(i)) for i, t in enumerate(ts)), "concat")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = a.data[idx]
    shape = a.data.shape
    fancy = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx)
    )

    def vjp(g):
        buf = np.zeros(shape)
        if fancy:
            np.add.at(buf, idx, g)
        else:
            buf[idx] += g
        return buf

    return _result(out, ((a, vjp),), "getitem")


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(shape, g)
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _result(out, ((a, vjp),), "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(shape, g / count)
        return np.broadcast_to(np.expand_dims(g / count, axis), shape).copy()

    return _result(out, ((a, vjp),), "mean")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), ((a, lambda g: g * sign),), "abs")


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(ad * ad, ((a, lambda g: 2.0 * g * ad),), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, ((a, lambda g: g * 0.5 / out),), "sqrt")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, ((a, lambda g: g * out),), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _result(np.log(ad), ((a, lambda g: g / ad),), "log")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, ((a, lambda g: g * (1.0 - out * out)),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Tanh-form GELU, the numpy-friendly standard variant."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _result(out, ((a, vjp),), "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _result(out, ((a, lambda g: g * _sigmoid(x)),), "softplus")


def cross3(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != (3,) or b.data.shape != (3,):
        raise ValueError("cross3 expects two 3-vectors")
    ad, bd = a.data, b.data
    out = np.cross(ad, bd)
    return _result(
        out,
        (
            (a, lambda g: np.cross(bd, g)),
            (b, lambda g: np.cross(g, ad)),
        ),
        "cross3",
    )


# ---------------------------------------------------------------------------
# Row-structured ops


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a 2-d tensor with row-max subtraction."""
    a = _as_tensor(a)
    x = a.data
    if x.ndim != 2:
        raise ValueError("softmax_rows expects a 2-d tensor")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    _count_flops(4 * x.size)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _result(out, ((a, vjp),), "softmax")


LAYER_NORM_EPS = 1e-5


def layer_norm(a, gain, bias) -> Tensor:
    """Per-row normalization of a 2-d tensor with affine gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    x = a.data
    if x.ndim != 2:
        raise ValueError("layer_norm expects a 2-d tensor")
    d = x.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm affine parameters must have shape ({d},), "
            f"got {gain.data.shape} and {bias.data.shape}"
        )
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def vjp_x(g):
        gy = g * gd
        m1 = gy.mean(axis=1, keepdims=True)
        m2 = (gy * xhat).mean(axis=1, keepdims=True)
        return inv * (gy - m1 - xhat * m2)

    return _result(
        out,
        (
            (a, vjp_x),
            (gain, lambda g: (g * xhat).sum(axis=0)),
            (bias, lambda g: g.sum(axis=0)),
        ),
        "layer_norm",
    )


# ---------------------------------------------------------------------------
# Grid ops


def avg_pool2d(a, stride: int) -> Tensor:
    """Non-overlapping mean pooling of an (h, w, c) grid by ``stride``."""
    a = _as_tensor(a)
    x = a.data
    if x.ndim != 3:
        raise ValueError("avg_pool2d expects an (h, w, c) tensor")
    h, w, c = x.shape
    if stride < 1 or h % stride or w % stride:
        raise ValueError(f"grid {h}x{w} not divisible by stride {stride}")
    hh, ww = h // stride, w // stride
    out = x.reshape(hh, stride, ww, stride, c).mean(axis=(1, 3))

    def vjp(g):
        expanded = np.broadcast_to(
            g[:, None, :, None, :], (hh, stride, ww, stride, c)
        )
        return (expanded / (stride * stride)).reshape(h, w, c)

    return _result(out, ((a, vjp),), "avg_pool2d")


def bilinear_patch(grid, coords: np.ndarray) -> Tensor:
    """Bilinearly sample an (h, w, c) grid at ``coords`` rows of (row, col).

    Coordinates are clamped to the grid; the gradient flows to the grid
    values only.  ``coords`` is plain data, never differentiated.
    """
    grid = _as_tensor(grid)
    x = grid.data
    if x.ndim != 3:
        raise ValueError("bilinear_patch expects an (h, w, c) grid")
    h, w, c = x.shape
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("coords must be (k, 2)")
    rows = np.clip(pts[:, 0], 0.0, h - 1.0)
    cols = np.clip(pts[:, 1], 0.0, w - 1.0)
    r0 = np.minimum(np.floor(rows), max(h - 2, 0)).astype(np.intp)
    c0 = np.minimum(np.floor(cols), max(w - 2, 0)).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[:, None]
    w00 = (1.0 - fr) * (1.0 - fc)
    w01 = (1.0 - fr) * fc
    w10 = fr * (1.0 - fc)
    w11 = fr * fc
    out = w00 * x[r0, c0] + w01 * x[r0, c1] + w10 * x[r1, c0] + w11 * x[r1, c1]

    def vjp(g):
        buf = np.zeros_like(x)
        np.add.at(buf, (r0, c0), g * w00)
        np.add.at(buf, (r0, c1), g * w01)
        np.add.at(buf, (r1, c0), g * w10)
        np.add.at(buf, (r1, c1), g * w11)
        return buf

    return _result(out, ((grid, vjp),), "bilinear_patch")
