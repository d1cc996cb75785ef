"""Report figures rendered next to the CSV outputs.

Figures are built on bare :class:`matplotlib.figure.Figure` objects (no pyplot
state) and saved as PNG without the software/date metadata, so identical
inputs give identical bytes.
"""

from __future__ import annotations

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .metrics import kde, kde_grid

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "savefig.bbox": "tight",
}
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _save(fig: Figure, path) -> None:
    fig.savefig(path, format="png", metadata={"Software": None})


def plot_threshold_sweep(sweeps: dict[str, list[tuple]], path) -> None:
    """POD, FAR, CSI and conditional RMSE against threshold, one line per model.

    ``sweeps`` maps a label to rows ``(threshold, pod, far, csi, rmse)``.
    """
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(7.0, 2.2))
        axes = fig.subplots(1, 4)
        titles = ("POD", "FAR", "CSI", "RMSE (dBZ)")
        for (label, rows), color in zip(sweeps.items(), COLORS):
            arr = np.array(rows, dtype=np.float64)
            for k, ax in enumerate(axes):
                ax.plot(arr[:, 0], arr[:, k + 1], marker="o", ms=3, color=color, label=label)
        for ax, title in zip(axes, titles):
            ax.set_title(title)
            ax.set_xlabel("threshold (dBZ)")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_sharpness_kde(samples: dict[str, np.ndarray], path) -> None:
    """KDE of per-sample sharpness with dashed mean and shaded one-std band."""
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(3.4, 2.4))
        ax = fig.subplots()
        for (label, g), color in zip(samples.items(), COLORS):
            g = np.asarray(g, dtype=np.float64)
            curve = g.size >= 2 and np.std(g) > 0
            if curve:
                x = kde_grid(g)
                ax.plot(x, kde(g, x), color=color, label=label)
            # a degenerate sample has no curve, so the mean line carries the label
            ax.axvline(g.mean(), color=color, ls="--", lw=1, label=None if curve else label)
            ax.axvspan(g.mean() - g.std(), g.mean() + g.std(), color=color, alpha=0.1)
        ax.set_xlabel("mean gradient magnitude g")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_loss_curves(rows, path, best_epoch: int | None = None) -> None:
    """``rows`` are ``(epoch, train_loss, val_loss)``."""
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(3.4, 2.4))
        ax = fig.subplots()
        ax.plot(arr[:, 0], arr[:, 1], color=COLORS[0], label="train")
        ax.plot(arr[:, 0], arr[:, 2], color=COLORS[1], label="validation")
        if best_epoch is not None:
            ax.axvline(best_epoch, color="0.5", ls=":", lw=1)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("weighted loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_attribution(background: np.ndarray, amap: np.ndarray, token: tuple[int, int],
                     patch_size: int, path) -> None:
    """Attribution map over a background channel with the selected token boxed."""
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(3.4, 3.0))
        ax = fig.subplots()
        ax.imshow(background, cmap="gray_r", vmin=0, vmax=1, interpolation="nearest")
        im = ax.imshow(amap, cmap="magma", alpha=0.6, vmin=0, vmax=1, interpolation="nearest")
        r, c = token
        ax.add_patch(Rectangle((c * patch_size - 0.5, r * patch_size - 0.5), patch_size,
                               patch_size, fill=False, ec="red", lw=1.5))
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="normalized sensitivity")
        fig.tight_layout()
        _save(fig, path)


def plot_prediction(inputs: np.ndarray, prediction: np.ndarray, target: np.ndarray,
                    channel_names, path) -> None:
    """Input channels followed by prediction and ground truth on a common scale."""
    panels = [*inputs, prediction, target]
    titles = [*channel_names, "prediction", "target"]
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(1.6 * len(panels), 1.9))
        axes = fig.subplots(1, len(panels))
        for ax, img, title in zip(axes, panels, titles):
            cmap = "viridis" if title in ("prediction", "target") else "gray"
            ax.imshow(img, cmap=cmap, vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        _save(fig, path)
