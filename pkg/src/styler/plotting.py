"""Figure rendering for synthesis reports.

Mel heatmap with the frame-level pitch contour (orange) and energy (purple)
drawn on a twin axis, plus a grid layout for ablation sweeps.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PITCH_COLOR = "#ff7f0e"
ENERGY_COLOR = "#8e44ad"

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
}


def _draw(ax, mel, pitch=None, energy=None, title=None):
    mel = np.asarray(mel)
    ax.imshow(mel.T, origin="lower", aspect="auto", cmap="magma", interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel channel")
    if title:
        ax.set_title(title)
    if pitch is None and energy is None:
        return
    twin = ax.twinx()
    frames = np.arange(mel.shape[0])
    if pitch is not None:
        twin.plot(frames, np.asarray(pitch), color=PITCH_COLOR, lw=1.4, label="pitch")
    if energy is not None:
        twin.plot(frames, np.asarray(energy), color=ENERGY_COLOR, lw=1.4, label="energy")
    twin.set_ylim(-0.05, 1.05)
    twin.set_yticks([])
    twin.legend(loc="upper right")


def plot_mel(path, mel, pitch=None, energy=None, title=None, figsize=(6.0, 2.6)):
    """Write one mel figure to ``path`` (format from the suffix)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize)
        _draw(ax, mel, pitch, energy, title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_grid(path, cells, ncols=3, cell_size=(4.0, 2.2)):
    """``cells``: list of dicts with ``mel`` and optional ``pitch``, ``energy``, ``title``."""
    n = len(cells)
    nrows = int(np.ceil(n / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(cell_size[0] * ncols, cell_size[1] * nrows), squeeze=False
        )
        for ax, cell in zip(axes.flat, cells):
            _draw(ax, cell["mel"], cell.get("pitch"), cell.get("energy"), cell.get("title"))
        for ax in axes.flat[n:]:
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_loss_curves(path, history, keys=("loss_total", "loss_clean", "l_mel_clean")):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        steps = [h["step"] for h in history]
        for k in keys:
            ax.plot(steps, [h[k] for h in history], lw=1.0, label=k)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
