"""Matplotlib and PNG rendering of feature maps, overlays and PR curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence as Seq

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch
from matplotlib import patches
from PIL import Image

from .head import Detection

__all__ = ["save_detection_overlay", "save_heatmap", "save_pr_curve"]


def save_heatmap(feature, path: Path) -> Path:
    """Render a feature map's channel mean as an 8-bit grayscale PNG.

    Normalisation maps the minimum to 0 and the maximum to 255; a constant
    map renders as all zeros.
    """
    if isinstance(feature, torch.Tensor):
        feature = feature.detach().cpu().numpy()
    arr = np.asarray(feature, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=0)
    if arr.ndim != 2:
        raise ValueError(f"expected a (c, h, w) or (h, w) feature map, got rank {arr.ndim}")
    lo, hi = arr.min(), arr.max()
    if hi > lo:
        arr = (arr - lo) / (hi - lo) * 255.0
    else:
        arr = np.zeros_like(arr)
    Image.fromarray(np.round(arr).astype(np.uint8), mode="L").save(path)
    return Path(path)


def save_detection_overlay(
    frame: np.ndarray,
    detections: Seq[Detection],
    path: Path,
    gt_boxes: Seq[Seq[float]] = (),
) -> Path:
    """Draw detections (solid) and ground truth (dashed) over a frame."""
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(frame, cmap="gray", interpolation="nearest")
    for x1, y1, x2, y2 in gt_boxes:
        ax.add_patch(
            patches.Rectangle(
                (x1, y1), x2 - x1, y2 - y1,
                fill=False, edgecolor="lime", linestyle="--", linewidth=1.2,
            )
        )
    for det in detections:
        x1, y1, x2, y2 = det.box
        ax.add_patch(
            patches.Rectangle(
                (x1, y1), x2 - x1, y2 - y1,
                fill=False, edgecolor="red", linewidth=1.2,
            )
        )
        ax.text(
            x1, max(0.0, y1 - 2.0), f"{det.score:.2f}",
            color="red", fontsize=8, va="bottom",
        )
    ax.set_axis_off()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return Path(path)


def save_pr_curve(
    points: Seq[tuple[float, float, float]],
    path: Path,
    map50: float | None = None,
) -> Path:
    """Plot a (recall, precision, envelope) point list to a PNG."""
    recall = [p[0] for p in points]
    precision = [p[1] for p in points]
    envelope = [p[2] for p in points]
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.plot(recall, precision, marker="o", markersize=3, label="precision")
    ax.step(recall, envelope, where="post", linestyle="--", label="envelope")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    title = "precision-recall"
    if map50 is not None:
        title += f" (AP50 = {map50:.4f})"
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return Path(path)
