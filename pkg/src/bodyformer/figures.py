"""Report figures (PNG) and portable graymap export for attention maps."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def write_pgm(path, values: np.ndarray) -> None:
    """ASCII portable graymap (P2).  Input is any non-negative 2-d array;
    it is scaled so the largest entry maps to 255."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"graymap needs a 2-d array, got {values.shape}")
    if values.size == 0 or (values < 0).any():
        raise ValueError("graymap values must be non-negative and non-empty")
    top = values.max()
    scaled = np.zeros_like(values) if top == 0 else values / top
    pixels = np.rint(scaled * 255).astype(int)
    h, w = pixels.shape
    lines = [f"P2", f"{w} {h}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pixels]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = fh.read().split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"not an ASCII graymap: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:], dtype=np.int64)
    if data.size != w * h:
        raise ValueError(f"graymap payload size mismatch in {path}")
    if maxval <= 0 or data.min() < 0 or data.max() > maxval:
        raise ValueError(f"graymap values out of range in {path}")
    return data.reshape(h, w)


def scaling_figure(path, fits: dict, title: str = "interaction cost scaling") -> None:
    """Log-log excess interaction cost per sweep with the fitted slope."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, fit in fits.items():
        l_values = np.asarray(fit.l_values, dtype=np.float64)
        excess = np.asarray(fit.interaction_flops, dtype=np.float64) - fit.offset
        ax.loglog(l_values, excess, "o", label=f"{name} (slope {fit.slope:.3f})")
        anchor = excess[0] / l_values[0] ** fit.slope
        ax.loglog(l_values, anchor * l_values ** fit.slope, "--", alpha=0.6)
    ax.set_xlabel("feature length")
    ax.set_ylabel("interaction flops above fixed cost")
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_figure(path, losses, title: str = "training loss") -> None:
    losses = np.asarray(losses, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(np.arange(losses.size), losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def attention_panel_figure(path, panels: list, title: str = "attention maps") -> None:
    """Heatmap grid; ``panels`` is a list of (label, 2-d array)."""
    if not panels:
        raise ValueError("need at least one panel")
    n = len(panels)
    cols = min(n, 4)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (label, values) in zip(axes.ravel(), panels):
        ax.imshow(np.asarray(values, dtype=np.float64), cmap="magma",
                  aspect="auto")
        ax.set_title(label, fontsize=9)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
