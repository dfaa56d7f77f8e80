"""Matplotlib figures written next to the CSV outputs.

Uses the non-interactive Agg backend; every function saves to ``path`` and
closes its figure.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def heatmap(matrix, tokens, path, title="mean attention", crop=None):
    """Query rows vs key columns; ``crop`` keeps the first n tokens."""
    M = np.asarray(matrix)
    if crop is not None:
        M = M[:crop, :crop]
        tokens = tokens[:crop]
    n = M.shape[0]
    fig, ax = plt.subplots(figsize=(0.35 * n + 2, 0.35 * n + 1.5))
    im = ax.imshow(M, cmap="viridis", aspect="equal")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(tokens, rotation=90, fontsize=7)
    ax.set_yticklabels(tokens, fontsize=7)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    _finish(fig, path)


def pca_scatter(rows, path, title="attention heads (PCA)"):
    """``rows`` as produced by ``analysis.pca_heads``; colored by layer."""
    layers = sorted({r[1] for r in rows})
    fig, ax = plt.subplots(figsize=(5, 4.5))
    cmap = plt.get_cmap("tab10")
    for i, layer in enumerate(layers):
        pts = np.array([(r[3], r[4]) for r in rows if r[1] == layer])
        ax.scatter(pts[:, 0], pts[:, 1], s=14, color=cmap(i % 10), label=f"layer {layer}", alpha=0.8)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title)
    ax.legend(fontsize=8, frameon=False)
    _finish(fig, path)


def grid_heatmap(alphas, betas, values, path, metric="dev metric"):
    values = np.asarray(values, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(values, cmap="magma", origin="upper")
    ax.set_xticks(range(len(betas)))
    ax.set_xticklabels([f"{b:g}" for b in betas])
    ax.set_yticks(range(len(alphas)))
    ax.set_yticklabels([f"{a:g}" for a in alphas])
    ax.set_xlabel("beta (PDG)")
    ax.set_ylabel("alpha (MDG)")
    for i in range(values.shape[0]):
        for j in range(values.shape[1]):
            ax.text(j, i, f"{values[i, j]:.3f}", ha="center", va="center", fontsize=7, color="w")
    ax.set_title(metric)
    fig.colorbar(im, ax=ax)
    _finish(fig, path)


def line_plot(xs, series, path, xlabel, ylabel, title=None):
    """``series``: mapping label -> y values aligned with ``xs``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    _finish(fig, path)


def bar_plot(labels, values, path, ylabel, baseline=None, title=None):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels)
    if baseline is not None:
        ax.axhline(baseline, color="tab:gray", linestyle="--", label="unguided")
        ax.legend(frameon=False)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    _finish(fig, path)
