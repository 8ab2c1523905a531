"""Turning per-frame touch scores into sparse detections.

Detection files are tab-separated text with a header line::

    video_id<TAB>frame<TAB>confidence

``frame`` may be fractional after offset refinement. Score dumps use the
same layout with columns ``video_id, frame, score, offset``.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import EventDetection, SpotConfig

DETECTION_HEADER = ("video_id", "frame", "confidence")
SCORE_HEADER = ("video_id", "frame", "score", "offset")


def gauss_tor(scores: Sequence[float], offsets: Sequence[float], sigma_a: float) -> np.ndarray:
    """Shift each frame's score by its attenuated offset, splitting it linearly between neighbours.

    Frame t targets p = t + o·exp(-o²/2σ_a²), clamped to [0, L-1]; score
    s_t lands as (1-frac)·s_t on ⌊p⌋ and frac·s_t on ⌈p⌉. Deposits on a
    frame combine by max; frames that receive nothing score 0.
    """
    if sigma_a <= 0:
        raise ValueError("sigma_a must be > 0")
    s = np.asarray(scores, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64)
    L = len(s)
    out = np.zeros(L)
    if L == 0:
        return out
    pos = np.arange(L) + o * np.exp(-(o**2) / (2 * sigma_a**2))
    pos = np.clip(pos, 0, L - 1)
    lo = np.floor(pos).astype(int)
    hi = np.ceil(pos).astype(int)
    frac = pos - lo
    np.maximum.at(out, lo, s * (1 - frac))
    np.maximum.at(out, hi, s * frac)
    return out


def hard_nms(scores: Sequence[float], window: int, floor: float = 0.01) -> list[EventDetection]:
    """Keep frames that beat every neighbour within ±window//2 (equal later neighbours lose)."""
    if window < 1:
        raise ValueError("window must be ≥ 1")
    s = np.asarray(scores, dtype=np.float64)
    half = window // 2
    keep = []
    for t in range(len(s)):
        if s[t] < floor:
            continue
        before = s[max(0, t - half) : t]
        after = s[t + 1 : t + half + 1]
        if (before < s[t]).all() and (after <= s[t]).all():
            keep.append(EventDetection(float(t), float(min(s[t], 1.0))))
    return keep


def merge_coincident(detections: Sequence[EventDetection]) -> list[EventDetection]:
    best: dict[float, EventDetection] = {}
    for d in detections:
        if d.frame not in best or d.confidence > best[d.frame].confidence:
            best[d.frame] = d
    return [best[f] for f in sorted(best)]


def soft_nms(
    detections: Sequence[EventDetection], sigma_s: float, window: Optional[int] = None, floor: float = 0.0
) -> list[EventDetection]:
    """Gaussian soft suppression: each selected peak decays its neighbours by exp(-Δ²/σ_s).

    Only detections within ±window//2 of the selected peak decay (all of them
    when ``window`` is None). Coincident frames are merged first, keeping the
    highest confidence. Detections decayed below ``floor`` are dropped.
    Output is ordered by selection (descending final confidence).
    """
    if sigma_s <= 0:
        raise ValueError("sigma_s must be > 0")
    pending = merge_coincident(detections)
    frames = np.array([d.frame for d in pending], dtype=np.float64)
    conf = np.array([d.confidence for d in pending], dtype=np.float64)
    alive = np.ones(len(pending), dtype=bool)
    reach = math.inf if window is None else window // 2
    out = []
    while alive.any():
        idx = np.flatnonzero(alive)
        # highest confidence, earliest frame on ties
        i = idx[np.lexsort((frames[idx], -conf[idx]))[0]]
        alive[i] = False
        if conf[i] >= floor:
            out.append(EventDetection(frames[i], conf[i]))
        rest = np.flatnonzero(alive)
        delta = np.abs(frames[rest] - frames[i])
        near = rest[delta <= reach]
        conf[near] *= np.exp(-((frames[near] - frames[i]) ** 2) / sigma_s)
    return out


def frame_detections(scores: Sequence[float], floor: float = 0.01) -> list[EventDetection]:
    """Every frame at or above ``floor`` as its own detection (no suppression)."""
    return [EventDetection(float(t), float(min(s, 1.0))) for t, s in enumerate(scores) if s >= floor]


def postprocess(scores, offsets, cfg: SpotConfig, use_tor: Optional[bool] = None, nms: Optional[str] = None):
    """Scores/offsets of one video -> detections, following the config's post-processing switches."""
    use_tor = cfg.use_tor if use_tor is None else use_tor
    nms = cfg.nms_kind if nms is None else nms
    s = np.asarray(scores, dtype=np.float64)
    if use_tor:
        s = gauss_tor(s, offsets, cfg.tor_sigma_value)
    if nms == "hard":
        return hard_nms(s, cfg.nms_window_value, cfg.confidence_floor)
    dets = frame_detections(s, cfg.confidence_floor)
    if nms == "soft":
        dets = soft_nms(dets, cfg.snms_sigma, cfg.nms_window_value, cfg.confidence_floor)
    elif nms != "none":
        raise ValueError(f"unknown nms kind {nms!r}")
    return dets


# -- files -----------------------------------------------------------------


def write_detections(detections: Mapping[str, Sequence[EventDetection]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(DETECTION_HEADER)
        for vid in sorted(detections):
            for d in sorted(detections[vid], key=lambda d: (d.frame, -d.confidence)):
                wr.writerow([vid, repr(float(d.frame)), repr(float(d.confidence))])


def read_detections(path: str | Path) -> dict[str, list[EventDetection]]:
    out: dict[str, list[EventDetection]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh, delimiter="\t")
        header = next(rd, None)
        if header is None:
            return out
        if tuple(header) != DETECTION_HEADER:
            raise ValueError(f"{path}: expected header {DETECTION_HEADER}, got {header}")
        for lineno, row in enumerate(rd, start=2):
            try:
                vid, frame, conf = row
                out.setdefault(vid, []).append(EventDetection(float(frame), float(conf)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_scores(scores: Mapping[str, tuple[np.ndarray, np.ndarray]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(SCORE_HEADER)
        for vid in sorted(scores):
            s, o = scores[vid]
            for t, (a, b) in enumerate(zip(s, o)):
                wr.writerow([vid, t, repr(float(a)), repr(float(b))])


def read_scores(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rows: dict[str, list[tuple[int, float, float]]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh, delimiter="\t")
        header = next(rd, None)
        if header is not None and tuple(header) != SCORE_HEADER:
            raise ValueError(f"{path}: expected header {SCORE_HEADER}, got {header}")
        for vid, t, s, o in rd:
            rows.setdefault(vid, []).append((int(t), float(s), float(o)))
    out = {}
    for vid, r in rows.items():
        r.sort()
        out[vid] = (np.array([x[1] for x in r]), np.array([x[2] for x in r]))
    return out
