"""Annotation files, clip sampling, hand patches and dataset statistics.

Annotation files are JSON Lines. The first line is a header::

    {"format_version": 1}

and every following line is one video::

    {"video_id": "v0000", "frame_count": 64, "fps": 30.0,
     "events": [12, 31],
     "hand_boxes": [[[x1, y1, x2, y2] | null, [x1, y1, x2, y2] | null], ...],
     "grasp_labels": [[int | null, int | null], ...]}

``hand_boxes`` and ``grasp_labels`` carry one (left, right) pair per frame.
Event frames are 0-based and video-relative. An empty file is an empty
dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import cv2
import numpy as np

from .core import (
    NUM_GRASP_CLASSES,
    AnnotationError,
    ClipSample,
    HandBox,
    Side,
    SpotConfig,
    SpotError,
    TouchEvent,
    clip_events,
)

FORMAT_VERSION = 1
SIDES = (Side.LEFT, Side.RIGHT)


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    frame_count: int
    fps: float
    events: tuple[TouchEvent, ...]
    hand_boxes: tuple[tuple[HandBox, HandBox], ...]
    grasp_labels: tuple[tuple[Optional[int], Optional[int]], ...]

    def __post_init__(self):
        vid = self.video_id
        if self.frame_count <= 0 or self.fps <= 0:
            raise AnnotationError(f"{vid}: frame_count and fps must be positive")
        object.__setattr__(self, "events", tuple(self.events))
        frames = [e.frame for e in self.events]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise AnnotationError(f"{vid}: events must be strictly increasing")
        if frames and frames[-1] >= self.frame_count:
            raise AnnotationError(f"{vid}: event frame {frames[-1]} ≥ frame_count {self.frame_count}")
        if len(self.hand_boxes) != self.frame_count:
            raise AnnotationError(f"{vid}: hand_boxes length {len(self.hand_boxes)} ≠ frame_count")
        if len(self.grasp_labels) != self.frame_count:
            raise AnnotationError(f"{vid}: grasp_labels length {len(self.grasp_labels)} ≠ frame_count")
        for t, (boxes, labels) in enumerate(zip(self.hand_boxes, self.grasp_labels)):
            for box, label in zip(boxes, labels):
                if label is None:
                    continue
                if not box.present:
                    raise AnnotationError(f"{vid}: grasp label for absent {box.side.value} hand at frame {t}")
                if not 0 <= label < NUM_GRASP_CLASSES:
                    raise AnnotationError(f"{vid}: grasp label {label} out of range at frame {t}")

    @property
    def event_frames(self) -> list[int]:
        return [e.frame for e in self.events]

    def grasp_array(self) -> np.ndarray:
        """(T, 2) int array, -1 where unlabeled."""
        return np.array([[-1 if g is None else g for g in pair] for pair in self.grasp_labels], dtype=np.int64)

    def present_array(self) -> np.ndarray:
        return np.array([[b.present for b in pair] for pair in self.hand_boxes], dtype=bool)


@dataclass
class DatasetStats:
    total_frames: int = 0
    total_events: int = 0
    # bucket 4 collects videos with four or more events
    clips_by_event_count: dict[int, int] = field(default_factory=lambda: {k: 0 for k in range(5)})
    num_videos: int = 0

    def report(self, title: str = "") -> str:
        labels = ["0 touches", "1 touch", "2 touches", "3 touches", "≥4 touches"]
        rows = [("# Frames", _human(self.total_frames)), ("# Touch events", str(self.total_events))]
        rows += [(f"# Clips ({lab})", str(self.clips_by_event_count[k])) for k, lab in enumerate(labels)]
        width = max(len(r[0]) for r in rows)
        lines = [title] if title else []
        lines += [f"{name:<{width}}  {value:>8}" for name, value in rows]
        return "\n".join(lines)


def _human(n: int) -> str:
    return f"{n / 1000:.0f}K" if n >= 10_000 else str(n)


# -- serialization ---------------------------------------------------------


def _box_from_json(raw, side: Side) -> HandBox:
    if raw is None:
        return HandBox.absent(side)
    x1, y1, x2, y2 = (float(v) for v in raw)
    return HandBox(x1, y1, x2, y2, side, True)


def annotation_from_record(rec: Mapping) -> VideoAnnotation:
    vid = rec.get("video_id", "<missing video_id>")
    try:
        boxes = tuple(
            (_box_from_json(pair[0], Side.LEFT), _box_from_json(pair[1], Side.RIGHT)) for pair in rec["hand_boxes"]
        )
        grasp = tuple((pair[0], pair[1]) for pair in rec["grasp_labels"])
        events = tuple(TouchEvent(f) for f in rec["events"])
        return VideoAnnotation(
            video_id=str(rec["video_id"]),
            frame_count=int(rec["frame_count"]),
            fps=float(rec["fps"]),
            events=events,
            hand_boxes=boxes,
            grasp_labels=grasp,
        )
    except AnnotationError as exc:
        msg = str(exc)
        raise AnnotationError(msg if msg.startswith(f"{vid}:") else f"{vid}: {msg}") from exc
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise AnnotationError(f"{vid}: malformed record ({exc!r})") from exc


def annotation_to_record(ann: VideoAnnotation) -> dict:
    return {
        "video_id": ann.video_id,
        "frame_count": ann.frame_count,
        "fps": ann.fps,
        "events": ann.event_frames,
        "hand_boxes": [[b.as_list() for b in pair] for pair in ann.hand_boxes],
        "grasp_labels": [list(pair) for pair in ann.grasp_labels],
    }


def load_annotations(path: str | Path) -> list[VideoAnnotation]:
    text = Path(path).read_text()
    if not text.strip():
        return []
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}:1: invalid JSON header ({exc.msg})") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise AnnotationError(f"{path}:1: expected header with format_version {FORMAT_VERSION}")
    out, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        try:
            ann = annotation_from_record(rec)
        except AnnotationError as exc:
            raise AnnotationError(f"{path}:{lineno}: {exc}") from exc
        if ann.video_id in seen:
            raise AnnotationError(f"{path}:{lineno}: {ann.video_id}: duplicate video_id")
        seen.add(ann.video_id)
        out.append(ann)
    return out


def dumps_annotations(annotations: Sequence[VideoAnnotation]) -> str:
    lines = [json.dumps({"format_version": FORMAT_VERSION})]
    lines += [json.dumps(annotation_to_record(a), separators=(",", ":")) for a in annotations]
    return "\n".join(lines) + "\n"


def save_annotations(annotations: Sequence[VideoAnnotation], path: str | Path) -> None:
    Path(path).write_text(dumps_annotations(annotations))


# -- splits ----------------------------------------------------------------


def split_by_video(annotations: Sequence[VideoAnnotation], val_fraction: float, seed: int):
    """Deterministic train/val split over video ids."""
    ids = sorted(a.video_id for a in annotations)
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_val = int(round(len(ids) * val_fraction))
    if val_fraction > 0 and len(ids) > 1:
        n_val = min(max(n_val, 1), len(ids) - 1)
    val_ids = set(ids[:n_val])
    train = [a for a in annotations if a.video_id not in val_ids]
    val = [a for a in annotations if a.video_id in val_ids]
    assert_disjoint(train, val)
    return train, val


def assert_disjoint(*splits: Sequence[VideoAnnotation]) -> None:
    seen: dict[str, int] = {}
    for i, split in enumerate(splits):
        for ann in split:
            if seen.get(ann.video_id, i) != i:
                raise AnnotationError(f"{ann.video_id}: appears in more than one split")
            seen[ann.video_id] = i


# -- clip sampling ---------------------------------------------------------


def sample_window(annotations: Sequence[VideoAnnotation], cfg: SpotConfig, rng: np.random.Generator) -> tuple[int, int]:
    """Pick (video index, start frame) for one training clip.

    With probability ``cfg.event_bias`` the window is forced to contain an
    event, when the chosen video has one.
    """
    L = cfg.clip_length
    eligible = [i for i, a in enumerate(annotations) if a.frame_count >= L]
    if not eligible:
        raise SpotError(f"no video has at least clip_length={L} frames")
    vi = eligible[int(rng.integers(len(eligible)))]
    ann = annotations[vi]
    max_start = ann.frame_count - L
    want_event = rng.random() < cfg.event_bias
    if want_event and ann.events:
        t = ann.events[int(rng.integers(len(ann.events)))].frame
        lo, hi = max(0, t - L + 1), min(t, max_start)
        return vi, int(rng.integers(lo, hi + 1))
    return vi, int(rng.integers(0, max_start + 1))


def sample_clip(
    annotations: Sequence[VideoAnnotation],
    cfg: SpotConfig,
    rng: np.random.Generator,
    frames: Mapping[str, np.ndarray],
) -> ClipSample:
    """Draw one L-frame window; ``frames`` maps video_id to a (T, H, W, 3) array."""
    vi, start = sample_window(annotations, cfg, rng)
    return make_clip(annotations[vi], frames[annotations[vi].video_id], start, cfg.clip_length)


def make_clip(ann: VideoAnnotation, video: np.ndarray, start: int, length: int) -> ClipSample:
    if start < 0 or start + length > ann.frame_count:
        raise SpotError(f"{ann.video_id}: window [{start}, {start + length}) outside video")
    clip = np.asarray(video[start : start + length])
    if clip.dtype == np.uint8:
        clip = clip.astype(np.float32) / 255.0
    return ClipSample(
        frames=clip,
        hand_boxes=ann.hand_boxes[start : start + length],
        events=tuple(clip_events(ann.event_frames, start, length)),
        grasp_labels=ann.grasp_array()[start : start + length],
        video_id=ann.video_id,
        start=start,
    )


# -- hand patches ----------------------------------------------------------


def expand_box(box: HandBox, scale: float) -> tuple[float, float, float, float]:
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    hw, hh = (box.x2 - box.x1) / 2 * scale, (box.y2 - box.y1) / 2 * scale
    return cx - hw, cy - hh, cx + hw, cy + hh


def extract_hand_patch(frame: np.ndarray, box: HandBox, scale: float, out_size: int) -> np.ndarray:
    """Crop the expanded box, zero-pad it to a centred square, resize to out_size.

    Returns float32 (out_size, out_size, 3); all zeros for an absent hand.
    """
    if scale < 1:
        raise ValueError("scale must be ≥ 1")
    out = np.zeros((out_size, out_size, 3), dtype=np.float32)
    if not box.present:
        return out
    img = np.asarray(frame)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    H, W = img.shape[:2]
    x1, y1, x2, y2 = expand_box(box, scale)
    c0, c1 = max(int(np.floor(x1)), 0), min(int(np.ceil(x2)), W)
    r0, r1 = max(int(np.floor(y1)), 0), min(int(np.ceil(y2)), H)
    if c0 >= c1 or r0 >= r1:
        return out
    crop = img[r0:r1, c0:c1].astype(np.float32)
    h, w = crop.shape[:2]
    side = max(h, w)
    square = np.zeros((side, side, 3), dtype=np.float32)
    oy, ox = (side - h) // 2, (side - w) // 2
    square[oy : oy + h, ox : ox + w] = crop
    if side == out_size:
        return square
    interp = cv2.INTER_AREA if side > out_size else cv2.INTER_LINEAR
    return cv2.resize(square, (out_size, out_size), interpolation=interp).astype(np.float32)


def video_hand_patches(video: np.ndarray, ann: VideoAnnotation, scale: float, out_size: int) -> np.ndarray:
    """Hand patches for every frame: (T, 2, out_size, out_size, 3) float32."""
    out = np.zeros((ann.frame_count, 2, out_size, out_size, 3), dtype=np.float32)
    for t, pair in enumerate(ann.hand_boxes):
        for h, box in enumerate(pair):
            if box.present:
                out[t, h] = extract_hand_patch(video[t], box, scale, out_size)
    return out


# -- statistics ------------------------------------------------------------


def compute_stats(annotations: Sequence[VideoAnnotation]) -> DatasetStats:
    stats = DatasetStats()
    for ann in annotations:
        stats.total_frames += ann.frame_count
        stats.total_events += len(ann.events)
        stats.clips_by_event_count[min(len(ann.events), 4)] += 1
        stats.num_videos += 1
    return stats
