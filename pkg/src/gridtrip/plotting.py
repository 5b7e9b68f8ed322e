"""Figure rendering for the ``report`` command."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

golden = (np.sqrt(5) - 1.0) / 2.0
fig_width = 7.0

model_colors = ["#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"]

params = {
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "font.size": 8,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_scenario(t, v_ss, detailed: dict, predicted: dict, title: str, path) -> Path:
    """Five stacked panels: voltage, one per code, and the weighted total.

    ``detailed`` maps panel label -> simulated fraction; ``predicted`` maps
    model name -> {panel label: fraction}.
    """
    labels = list(detailed)
    with plt.rc_context(params):
        fig, axes = plt.subplots(len(labels) + 1, 1, sharex=True,
                                 figsize=(fig_width, fig_width * golden * 1.6))
        axes[0].plot(t, v_ss, color="k")
        axes[0].set_ylabel("$v_{ss}$ (pu)")
        axes[0].set_title(title)
        for ax, label in zip(axes[1:], labels):
            ax.plot(t, detailed[label], color="k", label="detailed")
            for color, (name, curves) in zip(model_colors, predicted.items()):
                ax.plot(t, curves[label], color=color, linestyle="--", label=name)
            ax.set_ylabel(label)
            ax.set_ylim(-0.05, 1.05)
        axes[1].legend(loc="lower left", ncol=len(predicted) + 1)
        axes[-1].set_xlabel("time (s)")
        fig.align_ylabels(axes)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_mae(mae: dict, path, title: str = "MAE (%)") -> Path:
    """Grouped bars of the per-side MAE of each model."""
    models = list(mae)
    sides = sorted({s for m in models for s in mae[m]})
    x = np.arange(len(sides))
    width = 0.8 / max(1, len(models))
    with plt.rc_context(params):
        fig, ax = plt.subplots(figsize=(fig_width * 0.6, fig_width * 0.6 * golden))
        for i, (name, color) in enumerate(zip(models, model_colors)):
            ax.bar(x + i * width, [mae[name].get(s, np.nan) for s in sides], width,
                   color=color, label=name)
        ax.set_xticks(x + width * (len(models) - 1) / 2, sides)
        ax.set_ylabel("MAE (%)")
        ax.set_title(title)
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
