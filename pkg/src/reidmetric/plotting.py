"""Matplotlib figures written next to the CSV reports.

Uses the Agg backend and strips the PNG ``Software`` tag so identical data
gives byte-identical files.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def golden_size(width=4.5):
    return width, width * (np.sqrt(5.0) - 1.0) / 2.0


def save(fig, path):
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_cmc(curves, path, title="CMC"):
    """``curves`` maps a label to a CMC vector (rank-1 first)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size())
        for i, (label, curve) in enumerate(curves.items()):
            ranks = np.arange(1, len(curve) + 1)
            ax.plot(ranks, curve, color=PALETTE[i % len(PALETTE)], label=f"{label} (R1={curve[0]:.3f})")
        ax.set_xlabel("rank")
        ax.set_ylabel("matching rate")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.legend(loc="lower right")
        save(fig, path)


def plot_training_curve(entries, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size())
        ep = [e.epoch for e in entries]
        ax.plot(ep, [e.loss for e in entries], color=PALETTE[0], label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean batch loss")
        ax2 = ax.twinx()
        ax2.semilogy(ep, [e.lr for e in entries], color=PALETTE[1], ls="--", label="lr")
        ax2.set_ylabel("learning rate")
        ax2.grid(False)
        save(fig, path)


def plot_centroid_distances(groups, path):
    """Histogram of pairwise centroid distances; ``groups`` maps label -> distances."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size())
        bins = np.linspace(0.0, 2.0, 41)
        for i, (label, d) in enumerate(groups.items()):
            ax.hist(d, bins=bins, alpha=0.55, color=PALETTE[i % len(PALETTE)],
                    label=f"{label} (mean {np.mean(d):.3f})")
        ax.set_xlabel("cosine distance between identity centroids")
        ax.set_ylabel("pairs")
        ax.legend()
        save(fig, path)


def plot_comparison(rows, path, metrics=("rank1", "mAP", "centroid")):
    """Grouped bars; ``rows`` maps a model label to ``{metric: value}``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=golden_size(5.0))
        x = np.arange(len(metrics))
        width = 0.8 / max(len(rows), 1)
        for i, (label, vals) in enumerate(rows.items()):
            ax.bar(x + i * width, [vals[m] for m in metrics], width, label=label,
                   color=PALETTE[i % len(PALETTE)])
        ax.set_xticks(x + width * (len(rows) - 1) / 2)
        ax.set_xticklabels(metrics)
        ax.set_ylim(0, 1.05)
        ax.legend()
        save(fig, path)
