"""Matplotlib figures written next to the tabular outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "mmap",
}


def save_figure(fig, path):
    # no timestamps or version strings, so identical inputs give identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def cluster_map_figure(centers, labels, palette, title=None, image_hw=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        k = int(labels.max()) + 1 if len(labels) else 1
        cmap = ListedColormap([palette[i % len(palette)] for i in range(k)])
        ax.scatter(centers[:, 0], centers[:, 1], c=labels, cmap=cmap, vmin=-0.5,
                   vmax=k - 0.5, s=18, marker="o", linewidths=0)
        if image_hw is not None:
            ax.set_xlim(0, image_hw[1])
            ax.set_ylim(image_hw[0], 0)
        else:
            ax.invert_yaxis()
        ax.set_aspect("equal")
        ax.set_xlabel("x (px)")
        ax.set_ylabel("y (px)")
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return fig


def ablation_figure(rows, title=None):
    """Three side-by-side bar panels (PCC, MSE, MAE) over the ablation variants."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        names = [r["variant"] for r in rows]
        for ax, (key, label) in zip(axes, (("pcc_mean", "PCC"), ("mse", "MSE"),
                                           ("mae", "MAE"))):
            ax.bar(range(len(rows)), [r[key] for r in rows], color="#4c72b0", width=0.6)
            ax.set_xticks(range(len(rows)))
            ax.set_xticklabels(names, rotation=30, ha="right")
            ax.set_title(label)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
    return fig


def loss_curve_figure(history_by_stage):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for stage, hist in history_by_stage.items():
            ax.plot([h["epoch"] for h in hist], [h["l_ge"] for h in hist], marker=".",
                    label=stage)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean squared error")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
    return fig
