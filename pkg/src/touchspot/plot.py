"""Two-panel score/detection plots per video."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import EventDetection  # noqa: E402

DPI = 100


def render_video_plot(
    scores: np.ndarray,
    detections: Sequence[EventDetection],
    gt_frames: Sequence[int],
    delta: int = 2,
    size: tuple[int, int] = (900, 450),
    title: str = "",
):
    """Raw scores on top, post-processed detections below; GT as dashed lines with ±δ bands."""
    fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(size[0] / DPI, size[1] / DPI), dpi=DPI)
    t = np.arange(len(scores))
    top.bar(t, scores, width=0.8, color="tab:blue")
    if detections:
        bottom.bar([d.frame for d in detections], [d.confidence for d in detections], width=0.8, color="tab:blue")
    for ax in (top, bottom):
        for g in gt_frames:
            ax.axvline(g, color="tab:red", linestyle="--", linewidth=1)
            ax.axvspan(g - delta - 0.5, g + delta + 0.5, color="tab:red", alpha=0.15, linewidth=0)
        ax.set_ylim(0, 1.05)
        ax.set_xlim(-0.5, max(len(scores), 1) - 0.5)
    top.set_ylabel("raw score")
    bottom.set_ylabel("after NMS")
    bottom.set_xlabel("frame")
    if title:
        top.set_title(title)
    fig.tight_layout()
    return fig


def save_video_plot(path: str | Path, *args, **kwargs) -> Path:
    fig = render_video_plot(*args, **kwargs)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return Path(path)
