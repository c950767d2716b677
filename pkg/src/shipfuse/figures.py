"""Matplotlib renderings: SWIR | LWIR | fused comparison strips and report figures."""
from __future__ import annotations

import os
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
import numpy as np  # noqa: E402

from .detecthead import Detection  # noqa: E402

_SAVE = dict(dpi=100, metadata={"Software": None})


def _boxes(ax, dets: Sequence[Detection], h: int, w: int, color: str, label_score: bool):
    for d in dets:
        cx, cy, bw, bh = d.box
        ax.add_patch(Rectangle(((cx - bw / 2) * w - 0.5, (cy - bh / 2) * h - 0.5), bw * w, bh * h,
                               fill=False, edgecolor=color, linewidth=1.2))
        if label_score:
            ax.text((cx - bw / 2) * w, (cy - bh / 2) * h - 1, f"{d.score:.2f}", color=color, fontsize=6)


def panel_strip(path: str, swir: np.ndarray, lwir: np.ndarray, fused: np.ndarray,
                dets: Sequence[Detection] = (), gts: Sequence = (), title: Optional[str] = None) -> str:
    """Three grey panels side by side; detections in red, ground truth in green on the fused one."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    h, w = fused.shape
    for ax, img, name in zip(axes, (swir, lwir, fused), ("SWIR", "LWIR", "fused")):
        ax.imshow(img, cmap="gray", vmin=0, vmax=255, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    gt_dets = [Detection((g.cx, g.cy, g.w, g.h), 1.0, g.class_id) for g in gts]
    _boxes(axes[2], gt_dets, h, w, "lime", False)
    _boxes(axes[2], dets, h, w, "red", True)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def loss_curve(path: str, columns: Dict[str, Sequence[float]], step: Sequence[int]) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in columns.items():
        ax.plot(step, values, label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def metric_bars(path: str, means: Dict[str, float]) -> str:
    fig, axes = plt.subplots(1, len(means), figsize=(1.6 * len(means), 2.6))
    for ax, (name, v) in zip(np.atleast_1d(axes), means.items()):
        ax.bar([0], [v], color="steelblue")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.text(0, v, f"{v:.3g}", ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path
