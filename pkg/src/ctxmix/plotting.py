"""Static report figures (SVG) rendered with matplotlib's Agg backend.

Color scales are fixed so figures from different runs are comparable:
dot product and average precision map [0, 1] onto ``Blues`` (darker is better);
probes-needed maps [0, max] onto reversed ``Blues`` (darker is better, i.e. fewer).
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "ctxmix",
    "svg.fonttype": "path",
}

METRIC_SCALES = {
    "dot": ("Blues", 0.0, 1.0),
    "ap": ("Blues", 0.0, 1.0),
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def alignment_heatmap(
    table: Dict[str, Dict[int, float]], metric: str, path, title: str = ""
) -> Path:
    """Layers on the y axis, methods on the x axis, one cell per mean alignment."""
    methods = list(table)
    layers = sorted({l for per in table.values() for l in per})
    grid = np.full((len(layers), len(methods)), np.nan)
    for c, m in enumerate(methods):
        for r, l in enumerate(layers):
            if l in table[m]:
                grid[r, c] = table[m][l]
    if metric in METRIC_SCALES:
        cmap, vmin, vmax = METRIC_SCALES[metric]
    else:
        cmap, vmin, vmax = "Blues_r", 0.0, max(1.0, float(np.nanmax(grid)) if np.isfinite(grid).any() else 1.0)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(0.9 * len(methods) + 1.5, 0.45 * len(layers) + 1.2))
        im = ax.imshow(grid, cmap=cmap, vmin=vmin, vmax=vmax, aspect="auto")
        for r in range(len(layers)):
            for c in range(len(methods)):
                if np.isfinite(grid[r, c]):
                    dark = (grid[r, c] - vmin) / (vmax - vmin + 1e-12)
                    dark = dark if cmap == "Blues" else 1 - dark
                    ax.text(c, r, f"{grid[r, c]:.2f}", ha="center", va="center",
                            color="white" if dark > 0.6 else "black", fontsize=7)
        ax.set_xticks(range(len(methods)), methods, rotation=45, ha="right")
        ax.set_yticks(range(len(layers)), [str(l) for l in layers])
        ax.set_ylabel("layer")
        ax.set_title(title or metric)
        fig.colorbar(im, ax=ax, fraction=0.04)
        return _save(fig, path)


def compression_plot(layers: Sequence[int], compression: Sequence[float], path, title: str = "") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.plot(list(layers), list(compression), marker="o", color="tab:blue")
        ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
        ax.set_xlabel("layer")
        ax.set_ylabel("compression")
        ax.set_xticks(list(layers))
        ax.set_title(title or "online-code compression")
        return _save(fig, path)


def map_heatmap(matrix: np.ndarray, tokens: Sequence[str], path, title: str = "") -> Path:
    with plt.rc_context(RC):
        n = len(tokens)
        fig, ax = plt.subplots(figsize=(0.35 * n + 1.5, 0.35 * n + 1.0))
        im = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
        ax.set_xticks(range(n), tokens, rotation=90)
        ax.set_yticks(range(n), tokens)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.04)
        return _save(fig, path)
