"""Matplotlib figures written next to the text outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import METRIC_NAMES, MetricsReport, normalize_relevance  # noqa: E402
from .training import LossReport  # noqa: E402

# no timestamps or version strings, so repeated runs give identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_losses(losses: LossReport, path) -> None:
    means = losses.epoch_means()
    epochs = np.array(sorted(means))
    table = np.array([means[e] for e in epochs])
    fig, (ax_d, ax_g) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_d.plot(epochs, table[:, 0], color="tab:purple")
    ax_d.set_title("discriminator")
    ax_g.plot(epochs, table[:, 1], label="adversarial", color="tab:orange")
    ax_g.plot(epochs, table[:, 2], label="L1", color="tab:green")
    ax_g.set_title("generator")
    ax_g.legend()
    for ax in (ax_d, ax_g):
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_explanation(image: np.ndarray, mask: np.ndarray, relevance: np.ndarray, path, title: str = "") -> None:
    """Image, predicted mask and input relevance side by side.

    `image` is (3, h, w) in [-1, 1], `mask` (1, h, w), `relevance` (3, h, w).
    """
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.3))
    axes[0].imshow(np.clip((np.transpose(image, (1, 2, 0)) + 1) / 2, 0, 1))
    axes[0].set_title("image")
    axes[1].imshow(mask[0], cmap="gray", vmin=-1, vmax=1)
    axes[1].set_title("predicted mask")
    shown = axes[2].imshow(normalize_relevance(relevance), cmap="bwr", vmin=-1, vmax=1)
    axes[2].set_title("relevance")
    fig.colorbar(shown, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def plot_metrics(report: MetricsReport, path) -> None:
    mean = report.mean
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(METRIC_NAMES, [mean[k] for k in METRIC_NAMES], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_title(f"{report.aggregation} mean over {len(report.ids)} images")
    for i, k in enumerate(METRIC_NAMES):
        ax.text(i, mean[k] + 0.02, f"{mean[k]:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
