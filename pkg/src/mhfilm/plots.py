"""Figures rendered to files: hop attention heatmaps, learning curves, mode comparisons."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_hop_attention(matrix: np.ndarray, tokens: Sequence[str], path, title: str = "") -> Path:
    """Heatmap of a ``K x T`` hop-attention matrix with the tokens along the x axis."""
    matrix = np.asarray(matrix)
    k, t = matrix.shape
    fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * t + 1.5), 0.45 * k + 1.6))
    im = ax.imshow(matrix, aspect="auto", cmap="viridis", vmin=0.0, vmax=max(float(matrix.max()), 1e-12))
    ax.set_xticks(range(t))
    ax.set_xticklabels(tokens if len(tokens) == t else range(t), rotation=90, fontsize=7)
    ax.set_yticks(range(k))
    ax.set_yticklabels([f"hop {i + 1}" for i in range(k)])
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.03)
    return _save(fig, path)


def plot_learning_curves(history: Sequence[dict], path, key: str = "error") -> Path:
    """One line per split of ``key`` against epoch."""
    series: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for rec in history:
        if rec.get(key) is not None:
            series[rec["split"]].append((rec["epoch"], rec[key]))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for split, pts in sorted(series.items()):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o" if len(pts) < 30 else None, ms=3, label=split)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key)
    ax.grid(alpha=0.3)
    if series:
        ax.legend()
    return _save(fig, path)


def plot_comparison(rows: Sequence[dict], path, key: str = "error") -> Path:
    """Bar chart of ``key`` per ``mode``, with one dot per run and the mean as the bar."""
    by_mode: dict[str, list[float]] = defaultdict(list)
    for r in rows:
        by_mode[r["mode"]].append(float(r[key]))
    modes = list(by_mode)
    fig, ax = plt.subplots(figsize=(1.4 * len(modes) + 1.5, 3.2))
    means = [float(np.mean(by_mode[m])) for m in modes]
    ax.bar(range(len(modes)), means, color="#88a", alpha=0.8)
    for i, m in enumerate(modes):
        ax.scatter([i] * len(by_mode[m]), by_mode[m], color="k", s=10, zorder=3)
    ax.set_xticks(range(len(modes)))
    ax.set_xticklabels(modes)
    ax.set_ylabel(f"test {key}")
    return _save(fig, path)
