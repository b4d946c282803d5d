"""Attention over a multi-resolution feature pyramid, kept small on purpose.

Instead of self-attention over the concatenation of image tokens and target
tokens (quadratic in the total length), the cross step lets the short target
query the image tokens and the self step mixes the target rows only.  The
interaction cost then grows linearly with the number of image tokens.

Three query styles build on the same sublayer:

* ``multiscale_attention`` averages one cross pass per pyramid level, each
  with its own pooled positional encoding и its own weights;
* ``joint_aware_attention`` restricts a single target row to an ``r x r``
  window of the finest grid centered on a projected 2-d joint, with a
  learned relative-position bias;
* ``combined_attention`` averages the two for the joint rows and keeps the
  multiscale result untouched for the remaining rows.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor
from .numerics import tensor as T
from .numerics.tensor import active_collector

_LOCAL = threading.local()


# ---------------------------------------------------------------------------
# attention-map recording (for the visualization path and for tests)


@dataclass
class AttentionRecord:
    tag: str
    weights: np.ndarray  # (heads, l_q, l_k)


@contextmanager
def record_attention():
    """Collect every tagged attention map produced inside the block."""
    records: list[AttentionRecord] = []
    previous = getattr(_LOCAL, "records", None)
    _LOCAL.records = records
    try:
        yield records
    finally:
        _LOCAL.records = previous


def _emit(tag, head_maps):
    records = getattr(_LOCAL, "records", None)
    if records is not None and tag is not None:
        records.append(
            AttentionRecord(tag, np.stack([m.data.copy() for m in head_maps]))
        )


# ---------------------------------------------------------------------------
# weights


def _uniform(rng, fan_in, shape):
    limit = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, shape), requires_grad=True)


class AttentionLayer:
    """Parameters for one pre-norm attention sublayer plus its feed-forward.

    ``zero_attention`` zeroes the query and key projections, which makes
    every attention map exactly uniform while leaving the value path alone.
    """

    def __init__(self, d: int, heads: int, rng, zero_attention: bool = False):
        if d % heads != 0:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        if zero_attention:
            self.w_q = Tensor(np.zeros((d, d)), requires_grad=True)
            self.w_k = Tensor(np.zeros((d, d)), requires_grad=True)
        else:
            self.w_q = _uniform(rng, d, (d, d))
            self.w_k = _uniform(rng, d, (d, d))
        self.w_v = _uniform(rng, d, (d, d))
        self.w_out = _uniform(rng, d, (d, d))
        self.ln1_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln1_bias = Tensor(np.zeros(d), requires_grad=True)
        self.ln2_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln2_bias = Tensor(np.zeros(d), requires_grad=True)
        self.mlp_w1 = _uniform(rng, d, (d, 4 * d))
        self.mlp_b1 = Tensor(np.zeros(4 * d), requires_grad=True)
        self.mlp_w2 = _uniform(rng, 4 * d, (4 * d, d))
        self.mlp_b2 = Tensor(np.zeros(d), requires_grad=True)

    _PARAM_NAMES = (
        "w_q", "w_k", "w_v", "w_out",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    )

    def param_items(self, prefix: str):
        return [(f"{prefix}.{name}", getattr(self, name)) for name in self._PARAM_NAMES]


@dataclass
class UnitWeights:
    """One transformer unit: per-scale cross layers, a joint layer, a self layer."""

    scale_layers: list
    joint_layer: AttentionLayer
    self_layer: AttentionLayer

    def param_items(self, prefix: str):
        items = []
        for i, layer in enumerate(self.scale_layers):
            items += layer.param_items(f"{prefix}.scale{i + 1}")
        items += self.joint_layer.param_items(f"{prefix}.joint")
        items += self.self_layer.param_items(f"{prefix}.self")
        return items


def make_unit(d: int, heads: int, scales: int, rng, zero_attention=False) -> UnitWeights:
    return UnitWeights(
        scale_layers=[AttentionLayer(d, heads, rng, zero_attention) for _ in range(scales)],
        joint_layer=AttentionLayer(d, heads, rng, zero_attention),
        self_layer=AttentionLayer(d, heads, rng, zero_attention),
    )


# ---------------------------------------------------------------------------
# core sublayer


def mha(q, k, v, layer: AttentionLayer, logit_bias=None, tag=None) -> Tensor:
    """Multi-head attention body: projections, per-head softmax, out projection.

    Score/softmax/mix work is booked under the collector's "interaction"
    scope so the token-token cost can be read out separately from the
    per-token projection cost.
    """
    l_k = k.data.shape[0]
    col = active_collector()
    if col is not None:
        col.add_keys(l_k, l_k * layer.d * 8)
    q_proj = T.matmul(q, layer.w_q)
    k_proj = T.matmul(k, layer.w_k)
    v_proj = T.matmul(v, layer.w_v)
    d_head = layer.d // layer.heads
    scale = Tensor(1.0 / math.sqrt(d_head))
    recording = tag is not None and getattr(_LOCAL, "records", None) is not None
    outs = []
    maps = []
    with col.scope("interaction") if col is not None else nullcontext():
        for h in range(layer.heads):
            cols = slice(h * d_head, (h + 1) * d_head)
            logits = T.mul(T.matmul(q_proj[:, cols], T.transpose(k_proj[:, cols])), scale)
            if logit_bias is not None:
                logits = T.add(logits, logit_bias)
            weights = T.softmax_rows(logits)
            if recording:
                maps.append(weights)
            outs.append(T.matmul(weights, v_proj[:, cols]))
    if recording:
        _emit(tag, maps)
    return T.matmul(T.concat(outs, axis=1), layer.w_out)


def attend(q, k, v, layer: AttentionLayer, logit_bias=None, tag=None) -> Tensor:
    """Pre-norm residual sublayer: x = q + MHA(LN(q), LN(k), LN(v)); x + MLP(LN(x))."""
    qn = T.layer_norm(q, layer.ln1_gain, layer.ln1_bias)
    kn = qn if k is q else T.layer_norm(k, layer.ln1_gain, layer.ln1_bias)
    vn = qn if v is q else (kn if v is k else T.layer_norm(v, layer.ln1_gain, layer.ln1_bias))
    x = T.add(q, mha(qn, kn, vn, layer, logit_bias=logit_bias, tag=tag))
    hidden = T.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
    hidden = T.add(T.matmul(hidden, layer.mlp_w1), layer.mlp_b1)
    hidden = T.add(T.matmul(T.gelu(hidden), layer.mlp_w2), layer.mlp_b2)
    return T.add(x, hidden)


# ---------------------------------------------------------------------------
# variants


def full_attention(target, features, layer: AttentionLayer, tag=None) -> Tensor:
    """Baseline: self-attention over target and image tokens concatenated."""
    l_t = target.data.shape[0]
    if features is None or features.data.shape[0] == 0:
        return attend(target, target, target, layer, tag=tag)
    tokens = T.concat([target, features], axis=0)
    out = attend(tokens, tokens, tokens, layer, tag=tag)
    return out[:l_t]


def decoupled_attention(target, features, cross_layer, self_layer, tag=None) -> Tensor:
    """Cross (target queries image tokens) followed by self over the target.

    With no image tokens there is nothing to cross against, so the step is
    skipped and the cost collapses to the self stage alone.
    """
    if features is None or features.data.shape[0] == 0:
        x = target
    else:
        x = attend(target, features, features, cross_layer,
                   tag=None if tag is None else f"{tag}/cross")
    return attend(x, x, x, self_layer, tag=None if tag is None else f"{tag}/self")


def flatten_grid(grid) -> Tensor:
    h, w, d = grid.data.shape
    return T.reshape(grid, (h * w, d))


def pooled_positional_encodings(phi, scales: int, method: str = "iterative"):
    """Per-scale encodings, each the mean-pooled finest-grid table.

    ``iterative`` halves repeatedly; ``direct`` pools the finest grid once
    per scale with stride 2**(i-1).  Both produce the same values.
    """
    grids = [phi]
    if method == "iterative":
        for _ in range(1, scales):
            grids.append(T.avg_pool2d(grids[-1], 2))
    elif method == "direct":
        for i in range(1, scales):
            grids.append(T.avg_pool2d(phi, 2**i))
    else:
        raise ValueError(f"unknown pooling method {method!r}")
    return grids


def multiscale_attention(target, feature_tokens, phi_tokens, layers, tag=None) -> Tensor:
    """Average of one cross pass per scale against encoding-shifted tokens."""
    s = len(feature_tokens)
    if not (s == len(phi_tokens) == len(layers)):
        raise ValueError("feature tokens, encodings, and layers must align")
    acc = None
    for i in range(s):
        keys = T.add(feature_tokens[i], phi_tokens[i])
        out = attend(target, keys, keys, layers[i],
                     tag=None if tag is None else f"{tag}/scale{i + 1}")
        acc = out if acc is None else T.add(acc, out)
    return T.mul(acc, Tensor(1.0 / s))


def multiscale_concat(target, feature_tokens, phi_tokens, layer, tag=None) -> Tensor:
    """Ablation: one cross pass over all scales' tokens concatenated."""
    keys = T.concat(
        [T.add(f, p) for f, p in zip(feature_tokens, phi_tokens, strict=True)],
        axis=0,
    )
    return attend(target, keys, keys, layer, tag=tag)


# ---------------------------------------------------------------------------
# joint-aware attention


def joint_window_coords(joint_xy, grid_hw, window: int) -> np.ndarray:
    """Continuous (row, col) coordinates of the r x r window around a joint.

    The joint arrives in normalized [-1, 1] image coordinates; the window is
    centered on it with symmetric half-integer offsets, so an even window
    straddles the joint rather than snapping to a cell.
    """
    h, w = grid_hw
    x, y = float(joint_xy[0]), float(joint_xy[1])
    row_c = (y + 1.0) / 2.0 * (h - 1)
    col_c = (x + 1.0) / 2.0 * (w - 1)
    offsets = np.arange(window) - window / 2.0 + 0.5
    rows, cols = np.meshgrid(row_c + offsets, col_c + offsets, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def relative_bias_coords(window: int) -> np.ndarray:
    """Sample positions of the window offsets inside the (r+1)^2 bias table."""
    centered = np.arange(window) + 0.5  # offsets + window/2, in [0.5, r-0.5]
    rows, cols = np.meshgrid(centered, centered, indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def joint_aware_attention(row, grid, joint_xy, eta_tilde, layer: AttentionLayer,
                          window: int, tag=None) -> Tensor:
    """One target row attends to the finest-grid patch around its 2-d joint.

    ``eta_tilde`` is an (r+1, r+1, 1) learnable table; the relative bias for
    the r x r window is bilinearly read from it and added to the logits of
    every head.  Window placement is data, not part of the graph.
    """
    if row.data.shape[0] != 1:
        raise ValueError("joint-aware attention takes a single target row")
    h, w, _ = grid.data.shape
    coords = joint_window_coords(joint_xy, (h, w), window)
    keys = T.bilinear_patch(grid, coords)
    bias = T.reshape(
        T.bilinear_patch(eta_tilde, relative_bias_coords(window)),
        (1, window * window),
    )
    return attend(row, keys, keys, layer, logit_bias=bias, tag=tag)


# ---------------------------------------------------------------------------
# combined unit


@dataclass
class FeaturePyramid:
    """Feature grids (h_i, w_i, d), each level half the previous resolution."""

    grids: list

    def __post_init__(self):
        if not self.grids:
            raise ValueError("pyramid needs at least one level")
        d = self.grids[0].data.shape[2]
        for a, b in zip(self.grids, self.grids[1:]):
            ha, wa, da = a.data.shape
            hb, wb, db = b.data.shape
            if (hb * 2, wb * 2) != (ha, wa) or da != d or db != d:
                raise ValueError("each level must halve the previous grid")

    @property
    def scales(self) -> int:
        return len(self.grids)

    def tokens(self):
        return [flatten_grid(g) for g in self.grids]

    def token_counts(self):
        return [g.data.shape[0] * g.data.shape[1] for g in self.grids]


def combine_rows(ms_out, ja_rows) -> Tensor:
    """Average joint rows with their joint-aware counterparts; pass the rest through.

    The pass-through rows are sliced and concatenated only, so they carry the
    multiscale values bit for bit.
    """
    n = len(ja_rows)
    ja = T.concat(ja_rows, axis=0)
    top = T.mul(T.add(ms_out[:n], ja), Tensor(0.5))
    return T.concat([top, ms_out[n:]], axis=0)


def combined_attention(target, pyramid: FeaturePyramid, phi_grids, joints_xy,
                       unit: UnitWeights, eta_tilde, window: int, tag=None) -> Tensor:
    """Multiscale cross for all rows, averaged with joint-aware cross for joint rows."""
    phi_tokens = [flatten_grid(g) for g in phi_grids]
    ms = multiscale_attention(target, pyramid.tokens(), phi_tokens,
                              unit.scale_layers, tag=tag)
    ja_rows = [
        joint_aware_attention(
            target[i : i + 1], pyramid.grids[0], joints_xy[i], eta_tilde,
            unit.joint_layer, window,
            tag=None if tag is None else f"{tag}/joint{i}",
        )
        for i in range(len(joints_xy))
    ]
    return combine_rows(ms, ja_rows)


def transformer_unit(target, pyramid: FeaturePyramid, phi_grids, joints_xy,
                     unit: UnitWeights, eta_tilde, target_pe, window: int,
                     tag=None) -> Tensor:
    """One unit: positional shift, combined cross attention, then self attention."""
    x = T.add(target, target_pe)
    co = combined_attention(x, pyramid, phi_grids, joints_xy, unit, eta_tilde,
                            window, tag=tag)
    return attend(co, co, co, unit.self_layer,
                  tag=None if tag is None else f"{tag}/self")
