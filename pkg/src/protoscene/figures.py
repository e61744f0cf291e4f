"""Report figures rendered to files (matplotlib, Agg backend)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curves(metrics_path, out_path):
    """Per-term loss curves from a metrics.jsonl run log."""
    steps, terms = [], {}
    with open(metrics_path) as fh:
        for line in fh:
            rec = json.loads(line)
            steps.append(rec["step"])
            for key in ("total", "acc", "cov", "act", "slot", "proto"):
                terms.setdefault(key, []).append(rec[key])
    fig, ax = plt.subplots(figsize=(8, 5))
    for key, values in terms.items():
        ax.plot(steps, values, label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(ncol=3, fontsize=8)
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_prototypes(points: np.ndarray, intensity: np.ndarray, out_path):
    """Top and side scatter views of every prototype, (K, P, 3)."""
    k = points.shape[0]
    fig, axes = plt.subplots(2, k, figsize=(2.2 * k, 4.6), squeeze=False)
    for i in range(k):
        pts = points[i]
        for row, (a, b) in enumerate(((0, 1), (0, 2))):
            ax = axes[row][i]
            ax.scatter(pts[:, a], pts[:, b], s=2, c=[[0.2, 0.4, 0.7]])
            ax.set_aspect("equal")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0][i].set_title(f"proto {i}\nintensity {intensity[i]:.2f}", fontsize=8)
    axes[0][0].set_ylabel("top view", fontsize=8)
    axes[1][0].set_ylabel("side view", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_class_iou(table: dict, out_path):
    """Bar chart of the per-class IoU table."""
    classes = sorted(table)
    fig, ax = plt.subplots(figsize=(max(4, len(classes)), 3.5))
    ax.bar([str(c) for c in classes], [table[c] for c in classes], color="#4477aa")
    ax.set_ylabel("IoU (%)")
    ax.set_xlabel("class")
    ax.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_scene_overview(positions: np.ndarray, values: np.ndarray, out_path,
                        title: str = "", max_points: int = 50000, seed: int = 0):
    """Top-down scatter of a scene colored by a per-point value."""
    n = len(positions)
    if n > max_points:
        keep = np.random.default_rng(seed).choice(n, max_points, replace=False)
        positions, values = positions[keep], values[keep]
    fig, ax = plt.subplots(figsize=(6, 6))
    sc = ax.scatter(positions[:, 0], positions[:, 1], c=values, s=1, cmap="viridis")
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
