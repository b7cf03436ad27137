"""Figure rendering for the CLI report paths.

Training curves and per-class metric charts are written as PNGs next to
the delimited logs; overlays use a fixed palette (background transparent,
lane classes 1-4 in red, green, blue, yellow) so qualitative outputs stay
comparable across runs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

# class index -> RGB; 0 stays transparent
PALETTE = {
    1: (230, 25, 75),
    2: (60, 180, 75),
    3: (0, 130, 200),
    4: (255, 225, 25),
}


def save_training_curves(logs, path):
    """Loss / learning-rate / keep-prob / validation score panels."""
    epochs = [l.epoch for l in logs]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    axes[0, 0].plot(epochs, [l.loss for l in logs], color="tab:red")
    axes[0, 0].set_title("training loss")
    axes[0, 1].plot(epochs, [l.lr for l in logs], color="tab:blue")
    axes[0, 1].set_title("learning rate")
    axes[1, 0].plot(epochs, [l.keep_prob for l in logs], color="tab:green")
    axes[1, 0].set_title("DropBlock keep probability")
    if logs and logs[0].val_mean_f1 is not None:
        axes[1, 1].plot(epochs, [l.val_mean_f1 for l in logs], label="mean F1")
        axes[1, 1].plot(epochs, [l.val_mean_iou for l in logs], label="mean IoU")
        axes[1, 1].legend()
        axes[1, 1].set_ylim(0, 1)
    axes[1, 1].set_title("validation (lane classes)")
    for ax in axes.flat:
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metrics_chart(report_dict, path):
    """Grouped per-class P/R/F1/IoU bars from a serialized report."""
    per_class = report_dict["per-class"]
    classes = sorted(per_class, key=int)
    names = ("P", "R", "F1", "IoU")
    x = np.arange(len(classes))
    width = 0.2
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(classes), 4))
    for i, name in enumerate(names):
        vals = [per_class[c][name] for c in classes]
        ax.bar(x + (i - 1.5) * width, vals, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels([f"class {c}" for c in classes])
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.set_title(f"{report_dict['class-set']}: mean F1 {report_dict['mean-F1']:.2f}, "
                 f"mean IoU {report_dict['mean-IoU']:.2f}")
    ax.legend(ncol=4, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_overlay(mask: np.ndarray) -> np.ndarray:
    """RGBA overlay: transparent background, palette colors on lane pixels."""
    h, w = mask.shape
    overlay = np.zeros((h, w, 4), dtype=np.uint8)
    for cls, rgb in PALETTE.items():
        where = mask == cls
        overlay[where, :3] = rgb
        overlay[where, 3] = 255
    return overlay


def save_overlay(mask: np.ndarray, path):
    Image.fromarray(render_overlay(mask), mode="RGBA").save(path)


def save_mask(mask: np.ndarray, path):
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)
