"""Figures written next to the CSV reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TERM_STYLE = {
    "L_I": ("#d62728", "-"),
    "L_V": ("#1f77b4", "-"),
    "L_F": ("#2ca02c", "-"),
    "L_M": ("#9467bd", "-"),
    "total": ("black", "--"),
}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(history, path, title=None):
    """Loss terms per iteration on a log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    it = [r["iteration"] for r in history]
    for key, (color, ls) in TERM_STYLE.items():
        vals = np.array([r[key] for r in history])
        # log axis: hide exact zeros rather than fail
        ax.plot(it, np.where(vals > 0, vals, np.nan), color=color, ls=ls, lw=1.2, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, ncol=3, fontsize=8)
    ax.grid(alpha=0.3, which="both")
    return _finish(fig, path)


def plot_metric_rows(labels, rows, columns, path, title=None):
    """One small bar panel per metric, one bar per row label."""
    n = len(columns)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 3.2), squeeze=False)
    x = np.arange(len(labels))
    for k, (ax, col) in enumerate(zip(axes[0], columns)):
        ax.bar(x, [r[k] for r in rows], color="#4c72b0")
        ax.set_title(col, fontsize=9)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=60, fontsize=7)
        ax.tick_params(axis="y", labelsize=7)
    if title:
        fig.suptitle(title, fontsize=10)
    return _finish(fig, path)


def plot_fusion_panel(images, path):
    """Grid of named gray images (dict name -> 2-D array on [0, 1])."""
    names = list(images)
    fig, axes = plt.subplots(1, len(names), figsize=(2.4 * len(names), 2.6), squeeze=False)
    for ax, name in zip(axes[0], names):
        ax.imshow(images[name], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    return _finish(fig, path)
