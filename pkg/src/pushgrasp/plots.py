"""Figures written next to the CSV outputs (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curve(rows: list[dict], path: str | Path) -> Path:
    """Rolling success rate and mean attempts against iteration."""
    path = Path(path)
    iters = [r["iter"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(iters, [r["rolling_success_100"] for r in rows], color="tab:blue", marker="o", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("rolling success rate", color="tab:blue")
    ax.set_ylim(-0.02, 1.02)
    twin = ax.twinx()
    twin.plot(iters, [r["rolling_attempts_100"] for r in rows], color="tab:orange", marker="s", ms=3)
    twin.set_ylabel("rolling mean attempts", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_eval(labelled: dict[str, list[dict]], path: str | Path) -> Path:
    """Grouped bars of success rate and mean attempts per protocol, one group member per policy."""
    path = Path(path)
    labels = list(labelled)
    protocols = [r["protocol"] for r in labelled[labels[0]]]
    width = 0.8 / len(labels)
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for j, (key, title) in enumerate((("success_rate_pct", "success rate (%)"), ("mean_attempts", "mean attempts"))):
        ax = axes[j]
        for i, label in enumerate(labels):
            values = [r[key] for r in labelled[label]]
            ax.bar([p + i * width for p in range(len(protocols))], values, width, label=label)
        ax.set_xticks([p + width * (len(labels) - 1) / 2 for p in range(len(protocols))])
        ax.set_xticklabels(protocols, rotation=30, ha="right", fontsize=8)
        ax.set_title(title)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
