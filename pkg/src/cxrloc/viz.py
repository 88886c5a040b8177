"""Matplotlib figure rendering: box overlays, attention triptychs, and
ROC/PR curves, all written to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

from .atlas import NormalizedBox


def _draw_box(ax, box: NormalizedBox, size: int, color: str, label: str | None = None):
    ax.add_patch(Rectangle((box.x * size, box.y * size), box.w * size, box.h * size,
                           fill=False, edgecolor=color, linewidth=1.5, label=label))


def save_box_overlay(path, image, truth: NormalizedBox, pred: NormalizedBox,
                     iou_value: float | None = None):
    """Truth box in red, prediction in green, over the grayscale image."""
    size = image.shape[0]
    fig, ax = plt.subplots(figsize=(3, 3))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    _draw_box(ax, truth, size, "red", "truth")
    _draw_box(ax, pred, size, "lime", "prediction")
    title = f"IOU {iou_value:.3f}" if iou_value is not None else ""
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_cam_triptych(path, gain_map, image, baseline_map, truth: NormalizedBox | None = None):
    """Guided attention map, original image, unguided attention map."""
    size = image.shape[0]
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.7))
    for ax, (data, title) in zip(axes, [(gain_map, "guided attention"),
                                        (image, "image"),
                                        (baseline_map, "baseline attention")]):
        if title == "image":
            ax.imshow(data, cmap="gray", vmin=0, vmax=1)
        else:
            ax.imshow(image, cmap="gray", vmin=0, vmax=1)
            ax.imshow(data, cmap="jet", alpha=0.45, vmin=0, vmax=1)
        if truth is not None:
            _draw_box(ax, truth, size, "red")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_pr_roc_curves(out_dir, curves: dict):
    """curves: class name -> {"pr_points": [(r,p)...], "aupr": float,
    "roc_points": [(fpr,tpr)...], "auroc": float}. Writes pr_curves.png and
    roc_curves.png; returns their paths."""
    out_dir = Path(out_dir)
    paths = []

    fig, ax = plt.subplots(figsize=(4, 4))
    for name, c in curves.items():
        r, p = zip(*c["pr_points"])
        ax.plot(r, p, label=f"{name} (AUPR {c['aupr']:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    pr_path = out_dir / "pr_curves.png"
    fig.savefig(pr_path, dpi=100)
    plt.close(fig)
    paths.append(pr_path)

    fig, ax = plt.subplots(figsize=(4, 4))
    for name, c in curves.items():
        fpr, tpr = zip(*c["roc_points"])
        ax.plot(fpr, tpr, label=f"{name} (AUROC {c['auroc']:.3f})")
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(fontsize=8)
    fig.tight_layout()
    roc_path = out_dir / "roc_curves.png"
    fig.savefig(roc_path, dpi=100)
    plt.close(fig)
    paths.append(roc_path)
    return paths


def roc_points(scores, labels):
    """Threshold-sweep ROC points for plotting (not the AUROC path)."""
    import numpy as np

    order = np.argsort(-np.asarray(scores), kind="stable")
    labels = np.asarray(labels)[order]
    n_pos = max(int((labels == 1).sum()), 1)
    n_neg = max(int((labels == 0).sum()), 1)
    tp = fp = 0
    pts = [(0.0, 0.0)]
    for lab in labels:
        if lab == 1:
            tp += 1
        else:
            fp += 1
        pts.append((fp / n_neg, tp / n_pos))
    return pts
