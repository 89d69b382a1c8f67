"""Figures written next to the CSV outputs (Agg backend, PNG)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.linestyle": ":",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
})

METRIC_LABELS = [("psnr", "P-SNR [dB]"), ("mse", "MSE"), ("rmse", "R-MSE"), ("ssim", "SSIM")]


def plot_training(rows, heldout_l1, path):
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    for key, style in (("adv_d", "-"), ("adv_g", "--"), ("perturbed", ":"), ("cascade", "-.")):
        vals = [r[key] for r in rows]
        if any(v != 0 for v in vals):
            ax1.plot(epochs, vals, style, label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(frameon=False)

    ax2.plot(epochs, [r["l1"] for r in rows], label="train L1")
    if heldout_l1:
        e, v = zip(*heldout_l1)
        ax2.plot(e, v, "o-", ms=2, label="held-out L1")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("L1")
    ax2.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_ablation(results, path):
    labels = [r[0] for r in results]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.6), sharey=True)
    y = np.arange(len(labels))
    for ax, (key, title) in zip(axes, METRIC_LABELS):
        vals = [m[key] for _, m in results]
        vals = [v if math.isfinite(v) else np.nan for v in vals]
        ax.barh(y, vals, color="0.55")
        ax.set_title(title)
        ax.grid(axis="y", visible=False)
    axes[0].set_yticks(y)
    axes[0].set_yticklabels(labels)
    axes[0].invert_yaxis()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_psnr_histogram(report, path):
    vals = [s.psnr for s in report.images if math.isfinite(s.psnr)]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if vals:
        ax.hist(vals, bins=min(20, max(5, len(vals) // 2)), color="0.55")
    ax.set_xlabel("P-SNR [dB]")
    ax.set_ylabel("images")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
