"""Figure rendering for heatmaps and loss curves (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or build ids, so identical inputs give identical files
_SAVE_META = {
    ".svg": {"Date": None, "Creator": None},
    ".png": {"Software": None},
    ".pdf": {"CreationDate": None, "Producer": None, "Creator": None},
}


def _save(fig, path) -> Path:
    path = Path(path)
    if path.suffix == ".svg":
        plt.rcParams["svg.hashsalt"] = "dwfiber"
    fig.savefig(path, metadata=_SAVE_META.get(path.suffix))
    plt.close(fig)
    return path


def plot_heatmap(grid, path, title: str = "mean EMD (degrees)", vmax: float | None = None) -> Path:
    """Rows are theta1 (angle between the first two fibers), columns the third fiber's plane angle."""
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    t1, tp = np.asarray(grid.theta1), np.asarray(grid.theta_plane)
    img = ax.imshow(grid.mean, origin="lower", aspect="auto", cmap="viridis", vmin=0.0, vmax=vmax,
                    extent=_extent(tp, t1))
    ax.set_xlabel("third fiber angle to plane (deg)")
    ax.set_ylabel("theta1 (deg)")
    ax.set_title(title)
    fig.colorbar(img, ax=ax, label="EMD (deg)")
    fig.tight_layout()
    return _save(fig, path)


def _extent(x, y):
    def edges(v):
        if v.size == 1:
            return v[0] - 0.5, v[0] + 0.5
        step = (v[-1] - v[0]) / (v.size - 1)
        return v[0] - step / 2, v[-1] + step / 2
    return (*edges(x), *edges(y))


def plot_loss_curves(curves: dict, path, title: str = "validation loss", logy: bool = True) -> Path:
    """``curves`` maps a label to a sequence of per-epoch losses (or a list of repeats)."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, values in curves.items():
        arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
        epochs = np.arange(1, arr.shape[1] + 1)
        mean = arr.mean(axis=0)
        line, = ax.plot(epochs, mean, label=label)
        if arr.shape[0] > 1:
            ax.fill_between(epochs, arr.min(axis=0), arr.max(axis=0), color=line.get_color(), alpha=0.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
