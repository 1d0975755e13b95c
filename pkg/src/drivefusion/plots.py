"""File-only figures: prediction overlays, paths, the |angle| histogram, training curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluate import angle_histogram  # noqa: E402

TRUTH_COLOR = "tab:blue"
PRED_COLOR = "tab:red"


def plot_predictions(t_s, true_angle, pred_angle, true_speed, pred_speed, out, title=""):
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(9, 5), sharex=True)
    ax1.plot(t_s, true_angle, color=TRUTH_COLOR, label="ground truth")
    ax1.plot(t_s, pred_angle, color=PRED_COLOR, label="prediction")
    ax1.set_ylabel("steering angle (deg)")
    ax1.legend(loc="upper right")
    ax2.plot(t_s, true_speed, color=TRUTH_COLOR, label="ground truth")
    ax2.plot(t_s, pred_speed, color=PRED_COLOR, label="prediction")
    ax2.set_ylabel("speed (km/h)")
    ax2.set_xlabel("time (s)")
    ax2.legend(loc="upper right")
    if title:
        ax1.set_title(title)
    return _save(fig, out)


def plot_paths(paths: dict, out, title=""):
    """``paths`` maps a label to a Path2D; axes in kilometres at equal scale."""
    fig, ax = plt.subplots(figsize=(6, 6))
    for label, path in paths.items():
        ax.plot(path.x / 1000.0, path.y / 1000.0, label=label)
    ax.plot([0], [0], "ko", ms=4)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x (km)")
    ax.set_ylabel("y (km)")
    ax.legend()
    if title:
        ax.set_title(title)
    return _save(fig, out)


def plot_angle_histogram(angles, out, bin_width_deg=5.0):
    counts = angle_histogram(angles, bin_width_deg)
    edges = np.arange(len(counts)) * bin_width_deg
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(edges, counts, width=bin_width_deg, align="edge", color=TRUTH_COLOR)
    ax.set_yscale("log")
    ax.set_xlabel("|steering angle| (deg)")
    ax.set_ylabel("count")
    return _save(fig, out)


def plot_history(history, out):
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [h["train_loss"] for h in history], marker="o", label="train loss (normalized)")
    ax2 = ax.twinx()
    ax2.plot(epochs, [h["val_angle_mse"] for h in history], color="tab:orange", marker="s", label="val angle MSE")
    ax2.plot(epochs, [h["val_speed_mse"] for h in history], color="tab:green", marker="^", label="val speed MSE")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2.set_ylabel("validation MSE (raw units)")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="upper right")
    return _save(fig, out)


def _save(fig, out):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(out, metadata={"Software": None} if out.suffix == ".png" else None)
    plt.close(fig)
    return out
