"""Tolerance matching, AP@δ and mAP over tolerances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import EventDetection, SpotError, TouchEvent


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching outcome at one tolerance.

    ``order`` lists prediction indices in processing order (descending
    confidence, earlier frame first on ties); ``tp`` is aligned with ``order``.
    """

    order: tuple[int, ...]
    tp: tuple[bool, ...]
    gt_matched: tuple[bool, ...]
    confidences: tuple[float, ...]

    @property
    def num_tp(self) -> int:
        return sum(self.tp)


def round_frame(x: float) -> int:
    """Nearest integer, halves toward the earlier frame."""
    return int(math.ceil(x - 0.5))


def _gt_frames(gts) -> list[int]:
    return [g.frame if isinstance(g, TouchEvent) else int(g) for g in gts]


def match_predictions(preds: Sequence[EventDetection], gts, delta: int) -> MatchResult:
    if delta < 0:
        raise ValueError("delta must be ≥ 0")
    gt = _gt_frames(gts)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].frame))
    matched = [False] * len(gt)
    tp = []
    for i in order:
        f = round_frame(preds[i].frame)
        best, best_key = None, None
        for j, g in enumerate(gt):
            d = abs(f - g)
            if matched[j] or d > delta:
                continue
            key = (d, g)
            if best_key is None or key < best_key:
                best, best_key = j, key
        if best is not None:
            matched[best] = True
        tp.append(best is not None)
    return MatchResult(tuple(order), tuple(tp), tuple(matched), tuple(preds[i].confidence for i in order))


def ap_from_ranked(tp: Sequence[bool], num_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list."""
    if num_gt <= 0:
        raise SpotError("average precision is undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    hits = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(hits)
    precision = ctp / np.arange(1, len(hits) + 1)
    recall = ctp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _pooled_ap(results: Sequence[MatchResult], num_gt: int) -> float:
    conf = np.concatenate([np.asarray(r.confidences, dtype=np.float64) for r in results]) if results else np.zeros(0)
    tp = np.concatenate([np.asarray(r.tp, dtype=bool) for r in results]) if results else np.zeros(0, bool)
    # stable sort keeps each video's internal tie order
    idx = np.argsort(-conf, kind="stable")
    return ap_from_ranked(tp[idx], num_gt)


def average_precision(preds: Sequence[EventDetection], gts, delta: int) -> float:
    gt = _gt_frames(gts)
    if not gt:
        raise SpotError("average precision is undefined without ground truth")
    return ap_from_ranked(match_predictions(preds, gt, delta).tp, len(gt))


def map_over_tolerances(preds, gts, tolerances: Sequence[int]) -> tuple[float, dict[int, float]]:
    if not tolerances:
        raise ValueError("tolerances must be non-empty")
    per = {int(d): average_precision(preds, gts, d) for d in tolerances}
    return float(np.mean(list(per.values()))), per


def evaluate_videos(
    preds: Mapping[str, Sequence[EventDetection]],
    gts: Mapping[str, Sequence],
    tolerances: Sequence[int] = (0, 1, 2),
    per_video: bool = False,
) -> tuple[float, dict[int, float]]:
    """mAP over a set of videos.

    By default predictions and ground truths from all videos are pooled into
    one ranked list per tolerance; ``per_video=True`` averages per-video AP
    instead (videos without ground truth are skipped).
    """
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise SpotError(f"detections for unknown video ids: {', '.join(unknown[:5])}")
    per: dict[int, float] = {}
    for d in tolerances:
        if per_video:
            aps = [average_precision(preds.get(v, []), g, d) for v, g in gts.items() if len(g)]
            if not aps:
                raise SpotError("average precision is undefined without ground truth")
            per[int(d)] = float(np.mean(aps))
        else:
            num_gt = sum(len(g) for g in gts.values())
            results = [match_predictions(preds.get(v, []), g, d) for v, g in gts.items()]
            per[int(d)] = _pooled_ap(results, num_gt)
    return float(np.mean(list(per.values()))), per


def format_table(rows: Mapping[str, tuple[float, Mapping[int, float]]], tolerances=(0, 1, 2)) -> str:
    """Rows of (mAP, per-δ AP) as a percentage table."""
    head = ["", "mAP"] + [f"δ={d}" for d in tolerances]
    lines = ["\t".join(head)]
    for name, (m, per) in rows.items():
        lines.append("\t".join([name, f"{100 * m:.2f}"] + [f"{100 * per[d]:.2f}" for d in tolerances]))
    return "\n".join(lines)
