"""Figures written next to the CSV outputs of ``train`` and ``evaluate``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_loss_curves(rows, path, window: int = 25):
    """Total loss per stage against iteration, raw and moving-averaged.

    ``rows`` are dicts with keys ``iter``, ``stage`` and ``total``.
    """
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8))
        for ax, stage in zip(axes, (1, 2)):
            pts = [(r["iter"], r["total"]) for r in rows if r["stage"] == stage]
            ax.set_title(f"stage {stage}")
            ax.set_xlabel("iteration")
            if not pts:
                ax.text(0.5, 0.5, "not run", ha="center", va="center", transform=ax.transAxes)
                continue
            it, total = map(np.asarray, zip(*pts))
            ax.plot(it, total, lw=0.5, alpha=0.4, color="0.4")
            if len(total) >= window:
                smooth = np.convolve(total, np.ones(window) / window, mode="valid")
                ax.plot(it[window - 1:], smooth, lw=1.2, color="C0")
            ax.set_ylabel("total loss")
        _save(fig, path)


def plot_metrics(report, path, prior=None, images=None):
    """Per-image PSNR/SSIM bars; with ``prior`` and ``images`` also the illumination histograms."""
    from .histprior import illumination_histogram

    names = [r.name for r in report.rows]
    ncols = 3 if prior is not None and images else 2
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(3.2 * ncols, 2.8))
        x = np.arange(len(names))
        axes[0].bar(x, [r.psnr for r in report.rows], color="C0")
        axes[0].set_ylabel("PSNR (dB)")
        axes[1].bar(x, [r.ssim for r in report.rows], color="C1")
        axes[1].set_ylabel("SSIM")
        for ax in axes[:2]:
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=90, fontsize=6)
        if ncols == 3:
            centers = (np.arange(prior.bin_count) + 0.5) / prior.bin_count
            mean_hist = np.mean([illumination_histogram(im, prior.bin_count).bins for im in images], axis=0)
            axes[2].plot(centers, prior.bins, label="prior", color="k")
            axes[2].plot(centers, mean_hist, label="restored", color="C2")
            axes[2].set_xlabel("illumination")
            axes[2].set_ylabel("mass")
            axes[2].legend(frameon=False)
        _save(fig, path)


def plot_prior(prior, path):
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        centers = (np.arange(prior.bin_count) + 0.5) / prior.bin_count
        ax.bar(centers, prior.bins, width=1.0 / prior.bin_count, color="0.3")
        ax.set_xlabel("illumination")
        ax.set_ylabel("mass")
        ax.set_title(f"prior ({prior.corpus_size} images)")
        _save(fig, path)
