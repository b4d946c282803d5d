"""Cost measurement for the attention variants.

FLOPs follow a fixed convention: a matmul of (m, k) by (k, n) books m*k*n
(one multiply-add counts once), a softmax books 4 per element, and nothing
else is counted.  The collector splits out "interaction" FLOPs, the
score/softmax/mix work proportional to query-key pairs, because the scaling
claim is about that term: per-token projections grow linearly no matter
what and would drag a log-log fit of the total below its asymptote at these
sizes.  Exponents are therefore fit on interaction FLOPs after subtracting
the analytic zero-feature floor (the target's own self-attention work).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from .attention import (
    AttentionLayer,
    attend,
    decoupled_attention,
    flatten_grid,
    full_attention,
    joint_aware_attention,
    multiscale_attention,
    multiscale_concat,
)
from .numerics import CostCollector, Tensor, cost_scope

VARIANTS = ("full", "decoupled", "multiscale", "concat", "joint_aware")
DEFAULT_SWEEP = (256, 512, 1024, 2048, 4096)


class InsufficientDataError(ValueError):
    """Not enough well-spread points to fit a scaling exponent."""


class MemoryBudgetError(RuntimeError):
    """Estimated working set exceeds the requested budget."""


@dataclass
class BenchDims:
    """Shape of one measured configuration."""

    l_f: int
    l_t: int = 26
    d: int = 64
    heads: int = 4
    scales: int = 4
    window: int = 8
    n_joints: int = 24


@dataclass
class CostReport:
    variant: str
    l_f: int
    l_t: int
    d: int
    heads: int
    trial: int
    flops: int
    interaction_flops: int
    key_vectors: int
    key_bytes: int
    peak_bytes: int
    wall_ns: int


# ---------------------------------------------------------------------------
# analytic model


def attend_flops(l_q: int, l_k: int, d: int, heads: int) -> int:
    """Book cost of one attention sublayer (projections, scores, mix, MLP)."""
    return 10 * l_q * d * d + 2 * l_k * d * d + 2 * l_q * l_k * d + 4 * heads * l_q * l_k


def attend_interaction_flops(l_q: int, l_k: int, d: int, heads: int) -> int:
    return l_q * l_k * (2 * d + 4 * heads)


def pyramid_tokens(l_f: int, scales: int) -> list[int]:
    """Per-scale token counts when the finest level holds ``l_f`` tokens."""
    counts = []
    for i in range(scales):
        if l_f % (4**i):
            raise ValueError(f"{l_f} tokens do not split into {scales} halving levels")
        counts.append(l_f // 4**i)
    return counts


def analytic_flops(variant: str, dims: BenchDims) -> int:
    l_f, l_t, d, h = dims.l_f, dims.l_t, dims.d, dims.heads
    if variant == "full":
        n = l_t + l_f
        return attend_flops(n, n, d, h)
    if variant == "decoupled":
        cost = attend_flops(l_t, l_t, d, h)
        if l_f:
            cost += attend_flops(l_t, l_f, d, h)
        return cost
    if variant == "multiscale":
        return sum(attend_flops(l_t, n, d, h) for n in pyramid_tokens(l_f, dims.scales))
    if variant == "concat":
        return attend_flops(l_t, sum(pyramid_tokens(l_f, dims.scales)), d, h)
    if variant == "joint_aware":
        return dims.n_joints * attend_flops(1, dims.window**2, d, h)
    raise ValueError(f"unknown variant {variant!r}")


def analytic_interaction_flops(variant: str, dims: BenchDims) -> int:
    l_f, l_t, d, h = dims.l_f, dims.l_t, dims.d, dims.heads
    if variant == "full":
        n = l_t + l_f
        return attend_interaction_flops(n, n, d, h)
    if variant == "decoupled":
        cost = attend_interaction_flops(l_t, l_t, d, h)
        if l_f:
            cost += attend_interaction_flops(l_t, l_f, d, h)
        return cost
    if variant == "multiscale":
        return sum(
            attend_interaction_flops(l_t, n, d, h)
            for n in pyramid_tokens(l_f, dims.scales)
        )
    if variant == "concat":
        return attend_interaction_flops(l_t, sum(pyramid_tokens(l_f, dims.scales)), d, h)
    if variant == "joint_aware":
        return dims.n_joints * attend_interaction_flops(1, dims.window**2, d, h)
    raise ValueError(f"unknown variant {variant!r}")


def interaction_offset(variant: str, dims: BenchDims) -> int:
    """Interaction FLOPs left when the image contributes no tokens at all."""
    if variant in ("full", "decoupled"):
        return attend_interaction_flops(dims.l_t, dims.l_t, dims.d, dims.heads)
    if variant in ("multiscale", "concat"):
        return 0
    if variant == "joint_aware":
        return 0
    raise ValueError(f"unknown variant {variant!r}")


def grid_for_tokens(l_f: int) -> tuple[int, int]:
    """Power-of-two grid (h, w) with h*w == l_f, as square as possible."""
    k = l_f.bit_length() - 1
    if l_f <= 0 or 2**k != l_f:
        raise ValueError(f"token count {l_f} must be a power of two")
    return 2 ** (k // 2), 2 ** (k - k // 2)


# ---------------------------------------------------------------------------
# memory estimate


def estimate_attention_bytes(variant: str, dims: BenchDims) -> int:
    """Coarse upper bound on the forward working set, in bytes.

    Dominated by one head's live score matrices (a few copies during the
    shift/exp/normalize chain) plus the token projections.
    """

    def attend_bytes(l_q, l_k):
        return 8 * (6 * l_q * l_k + 20 * (l_q + l_k) * dims.d)

    l_f, l_t = dims.l_f, dims.l_t
    if variant == "full":
        n = l_t + l_f
        return attend_bytes(n, n)
    if variant == "decoupled":
        return attend_bytes(l_t, max(l_f, l_t))
    if variant == "multiscale":
        return attend_bytes(l_t, max(pyramid_tokens(l_f, dims.scales))) + 8 * l_f * dims.d * 2
    if variant == "concat":
        return attend_bytes(l_t, sum(pyramid_tokens(l_f, dims.scales)))
    if variant == "joint_aware":
        return attend_bytes(1, dims.window**2) + 8 * l_f * dims.d
    raise ValueError(f"unknown variant {variant!r}")


def check_memory_budget(variant: str, dims: BenchDims, budget_mb: float | None) -> None:
    if budget_mb is None:
        return
    need = estimate_attention_bytes(variant, dims)
    if need > budget_mb * 1024 * 1024:
        raise MemoryBudgetError(
            f"{variant} at l_f={dims.l_f} needs about {need / 2**20:.1f} MiB, "
            f"budget is {budget_mb:.1f} MiB"
        )


# ---------------------------------------------------------------------------
# measurement


def _build_grids(rng, l_f: int, scales: int, d: int):
    h, w = grid_for_tokens(l_f)
    if h % 2 ** (scales - 1) or w % 2 ** (scales - 1):
        raise ValueError(f"grid {h}x{w} cannot halve {scales - 1} times")
    grids = []
    for i in range(scales):
        grids.append(Tensor(rng.standard_normal((h >> i, w >> i, d))))
    return grids


def measure_attention(variant: str, dims: BenchDims, trials: int = 1, seed: int = 0,
                      budget_mb: float | None = None) -> list[CostReport]:
    """Run the variant forward ``trials`` times and report counted costs.

    Inputs are fixed random draws; no gradient tape is active, so the peak
    byte figure reflects inference-style evaluation.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    check_memory_budget(variant, dims, budget_mb)
    rng = np.random.default_rng(seed)
    d, heads, l_t, l_f = dims.d, dims.heads, dims.l_t, dims.l_f
    target = Tensor(rng.standard_normal((l_t, d)))

    if variant == "full":
        layer = AttentionLayer(d, heads, rng)
        features = Tensor(rng.standard_normal((l_f, d)))
        run = lambda: full_attention(target, features, layer)
    elif variant == "decoupled":
        cross = AttentionLayer(d, heads, rng)
        self_l = AttentionLayer(d, heads, rng)
        features = Tensor(rng.standard_normal((l_f, d)))
        run = lambda: decoupled_attention(target, features, cross, self_l)
    elif variant in ("multiscale", "concat"):
        grids = _build_grids(rng, l_f, dims.scales, d)
        tokens = [flatten_grid(g) for g in grids]
        phis = [Tensor(rng.standard_normal(t.data.shape)) for t in tokens]
        if variant == "multiscale":
            layers = [AttentionLayer(d, heads, rng) for _ in range(dims.scales)]
            run = lambda: multiscale_attention(target, tokens, phis, layers)
        else:
            layer = AttentionLayer(d, heads, rng)
            run = lambda: multiscale_concat(target, tokens, phis, layer)
    else:  # joint_aware
        h, w = grid_for_tokens(l_f)
        grid = Tensor(rng.standard_normal((h, w, d)))
        layer = AttentionLayer(d, heads, rng)
        eta = Tensor(rng.standard_normal((dims.window + 1, dims.window + 1, 1)))
        joints = rng.uniform(-0.9, 0.9, (dims.n_joints, 2))

        def run():
            rows = [
                joint_aware_attention(target[i : i + 1], grid, joints[i], eta,
                                      layer, dims.window)
                for i in range(dims.n_joints)
            ]
            return rows[-1]

    reports = []
    for trial in range(trials):
        col = CostCollector()
        start = time.perf_counter_ns()
        with cost_scope(col):
            run()
        wall = time.perf_counter_ns() - start
        reports.append(
            CostReport(
                variant=variant, l_f=l_f, l_t=l_t, d=d, heads=heads, trial=trial,
                flops=col.flops, interaction_flops=col.interaction_flops,
                key_vectors=col.key_vectors, key_bytes=col.key_bytes,
                peak_bytes=col.peak_bytes, wall_ns=wall,
            )
        )
    return reports


def run_scaling_sweep(variants=("full", "decoupled"), l_values=DEFAULT_SWEEP,
                      l_t: int = 26, d: int = 64, heads: int = 4, trials: int = 1,
                      seed: int = 0, budget_mb: float | None = None) -> list[CostReport]:
    reports = []
    for variant in variants:
        for l_f in l_values:
            dims = BenchDims(l_f=l_f, l_t=l_t, d=d, heads=heads)
            reports.extend(
                measure_attention(variant, dims, trials=trials, seed=seed,
                                  budget_mb=budget_mb)
            )
    return reports


# ---------------------------------------------------------------------------
# fitting


def fit_scaling_exponent(l_values, costs, offset: float = 0.0) -> float:
    """Least-squares slope of log(cost - offset) against log(l_f).

    Requires at least four points whose sizes span a factor of eight, so a
    slope is meaningful rather than noise through two dots.
    """
    ls = np.asarray(l_values, dtype=np.float64)
    cs = np.asarray(costs, dtype=np.float64)
    if ls.shape != cs.shape or ls.ndim != 1:
        raise ValueError("sizes and costs must be matching 1-d sequences")
    if len(ls) < 4:
        raise InsufficientDataError(f"need at least 4 points, got {len(ls)}")
    if ls.min() <= 0 or ls.max() / ls.min() < 8.0:
        raise InsufficientDataError("sizes must be positive and span at least 8x")
    excess = cs - offset
    if np.any(excess <= 0):
        raise InsufficientDataError("costs must exceed the subtracted offset")
    slope, _ = np.polyfit(np.log(ls), np.log(excess), 1)
    return float(slope)


@dataclass
class SlopeFit:
    variant: str
    slope: float
    offset: float
    l_values: list[int]
    interaction_flops: list[int]


def scaling_exponents(reports: list[CostReport]) -> dict[str, SlopeFit]:
    """Group sweep reports by variant and fit each interaction exponent."""
    by_variant: dict[str, dict[int, list[int]]] = {}
    dims_seen: dict[str, BenchDims] = {}
    for r in reports:
        by_variant.setdefault(r.variant, {}).setdefault(r.l_f, []).append(
            r.interaction_flops
        )
        dims_seen[r.variant] = BenchDims(l_f=r.l_f, l_t=r.l_t, d=r.d, heads=r.heads)
    fits = {}
    for variant, groups in by_variant.items():
        ls = sorted(groups)
        costs = [float(np.mean(groups[l])) for l in ls]
        offset = interaction_offset(variant, dims_seen[variant])
        slope = fit_scaling_exponent(ls, costs, offset=offset)
        fits[variant] = SlopeFit(variant, slope, float(offset), ls,
                                 [int(c) for c in costs])
    return fits


# ---------------------------------------------------------------------------
# pyramid comparison


@dataclass
class PyramidComparison:
    """Measured cost of one decoupled unit against full attention on the
    same tokens concatenated."""

    grid: int
    token_counts: list[int]
    decoupled_flops: int
    full_flops: int
    ratio: float


def compare_default_pyramid(grid: int = 56, l_t: int = 26, d: int = 64,
                            heads: int = 4, scales: int = 4, window: int = 8,
                            n_joints: int = 24, seed: int = 0) -> PyramidComparison:
    """Cost of one multiscale+joint+self unit vs full attention over the
    concatenation of every pyramid level plus the target."""
    rng = np.random.default_rng(seed)
    if grid % 2 ** (scales - 1):
        raise ValueError(f"grid {grid} cannot halve {scales - 1} times")
    grids = [Tensor(rng.standard_normal((grid >> i, grid >> i, d))) for i in range(scales)]
    tokens = [flatten_grid(g) for g in grids]
    counts = [t.data.shape[0] for t in tokens]
    phis = [Tensor(rng.standard_normal(t.data.shape)) for t in tokens]
    target = Tensor(rng.standard_normal((l_t, d)))
    joints = rng.uniform(-0.9, 0.9, (n_joints, 2))
    eta = Tensor(rng.standard_normal((window + 1, window + 1, 1)))
    scale_layers = [AttentionLayer(d, heads, rng) for _ in range(scales)]
    joint_layer = AttentionLayer(d, heads, rng)
    self_layer = AttentionLayer(d, heads, rng)

    col = CostCollector()
    with cost_scope(col):
        ms = multiscale_attention(target, tokens, phis, scale_layers)
        for i in range(n_joints):
            joint_aware_attention(target[i : i + 1], grids[0], joints[i], eta,
                                  joint_layer, window)
        attend(ms, ms, ms, self_layer)
    decoupled_flops = col.flops

    full_layer = AttentionLayer(d, heads, rng)
    all_tokens = Tensor(
        np.concatenate([t.data + p.data for t, p in zip(tokens, phis)], axis=0)
    )
    col = CostCollector()
    with cost_scope(col):
        full_attention(target, all_tokens, full_layer)
    full_flops = col.flops

    return PyramidComparison(
        grid=grid, token_counts=counts, decoupled_flops=decoupled_flops,
        full_flops=full_flops, ratio=full_flops / decoupled_flops,
    )


# ---------------------------------------------------------------------------
# attention-map statistics


def attention_kl_diffuseness(weights) -> np.ndarray:
    """Per-row KL divergence from the uniform distribution, in nats.

    Zero means perfectly diffuse (uniform) attention; rows must be valid
    distributions.  Accepts (..., l_q, l_k); returns (..., l_q).
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim < 2:
        raise ValueError("expected at least a (rows, keys) matrix")
    if np.any(w < 0):
        raise ValueError("attention weights must be nonnegative")
    sums = w.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ValueError("attention rows must sum to 1 within 1e-9")
    n = w.shape[-1]
    scaled = w * n
    terms = np.where(w > 0, w * np.log(np.where(scaled > 0, scaled, 1.0)), 0.0)
    return terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# delimited output


def write_reports_csv(path, reports: list[CostReport]) -> None:
    names = [f.name for f in dataclass_fields(CostReport)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for r in reports:
            writer.writerow([getattr(r, n) for n in names])


def write_loglog_csv(path, fits: dict[str, SlopeFit]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "l_f", "interaction_flops", "excess_flops",
                         "log10_l_f", "log10_excess"])
        for fit in fits.values():
            for l_f, cost in zip(fit.l_values, fit.interaction_flops):
                excess = cost - fit.offset
                writer.writerow([
                    fit.variant, l_f, cost, f"{excess:.17g}",
                    f"{math.log10(l_f):.17g}", f"{math.log10(excess):.17g}",
                ])


def write_slopes_csv(path, fits: dict[str, SlopeFit],
                     comparison: PyramidComparison | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "value"])
        for fit in fits.values():
            writer.writerow([f"slope_{fit.variant}", f"{fit.slope:.17g}"])
            writer.writerow([f"offset_{fit.variant}", f"{fit.offset:.17g}"])
        if comparison is not None:
            writer.writerow(["pyramid_decoupled_flops", comparison.decoupled_flops])
            writer.writerow(["pyramid_full_flops", comparison.full_flops])
            writer.writerow(["pyramid_ratio", f"{comparison.ratio:.17g}"])
