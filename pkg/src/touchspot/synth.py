"""Toy egocentric sequences with exactly known touch frames.

A textured disc ("object") sits near the frame centre. One or two disc
"hands" idle, approach it in a straight line, hold contact for a few frames
and retract. The touch frame is the first frame whose world-space discs
intersect, computed from geometry rather than from pixels. Camera jitter is
applied only at render time, so it moves boxes and pixels but never the
touch frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .core import HandBox, Side, TouchEvent
from .data import VideoAnnotation, load_annotations, save_annotations

CONTACT_EPS = 1e-9
SKIN = np.array([0.86, 0.62, 0.48])


@dataclass(frozen=True)
class SynthParams:
    frame_size: int = 32
    num_frames: int = 64
    hand_speed: tuple[float, float] = (1.0, 2.5)
    camera_jitter: float = 0.4
    blur_prob: float = 0.1
    num_events: tuple[int, int] = (1, 2)
    min_event_gap: int = 5
    seed: int = 0
    fps: float = 30.0
    hand_radius: tuple[float, float] = (3.0, 4.0)
    object_radius: tuple[float, float] = (4.0, 5.0)
    approach_gap: tuple[float, float] = (3.0, 7.0)
    dwell: tuple[int, int] = (4, 7)
    near_miss_prob: float = 0.5
    noise_std: float = 0.02
    id_prefix: str = "v"

    def __post_init__(self):
        lo, hi = self.hand_speed
        if not 0 < lo <= hi:
            raise ValueError("hand_speed range must be positive and ordered")
        if self.frame_size < 16:
            raise ValueError("frame_size must be ≥ 16")
        if not 1 <= self.num_events[0] <= self.num_events[1] <= 2:
            raise ValueError("num_events must lie within [1, 2]")
        if not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("blur_prob must lie in [0, 1]")
        if self.camera_jitter < 0 or self.min_event_gap < 1:
            raise ValueError("camera_jitter must be ≥ 0 and min_event_gap ≥ 1")
        if self.num_frames < 40:
            raise ValueError("num_frames must be ≥ 40 to fit an approach, contact and retreat")


@dataclass(frozen=True)
class HandTrack:
    """Straight-line approach / hold / retract motion of one hand in world space."""

    side: Side
    start: tuple[float, float]
    direction: tuple[float, float]  # unit vector pointing at the object
    speed: float
    move_start: int
    approach_frames: int
    dwell: int
    radius: float

    def displacement(self, k: int) -> float:
        s, n = self.move_start, self.approach_frames
        if k <= s:
            return 0.0
        if k <= s + n:
            return self.speed * (k - s)
        hold_end = s + n + self.dwell - 1
        if k <= hold_end:
            return self.speed * n
        return max(self.speed * n - self.speed * (k - hold_end), 0.0)

    def position(self, k: int) -> tuple[float, float]:
        d = self.displacement(k)
        return self.start[0] + d * self.direction[0], self.start[1] + d * self.direction[1]


def disc_gap(p: Sequence[float], r: float, q: Sequence[float], s: float) -> float:
    """Signed clearance between two discs; ≤ 0 means they intersect."""
    return math.hypot(p[0] - q[0], p[1] - q[1]) - r - s


def first_contact_frame(track: HandTrack, obj_center, obj_radius: float, num_frames: int) -> Optional[int]:
    for k in range(num_frames):
        if disc_gap(track.position(k), track.radius, obj_center, obj_radius) <= CONTACT_EPS:
            return k
    return None


def frames_to_contact(gap: float, speed: float) -> int:
    """Frames of motion needed to close ``gap`` at ``speed`` px/frame."""
    return max(math.ceil(gap / speed - CONTACT_EPS), 0)


def disc_mask(center, radius: float, size: int, supersample: int = 4) -> np.ndarray:
    """Boolean disc mask on a supersampled pixel grid (size*supersample square)."""
    n = size * supersample
    c = (np.arange(n) + 0.5) / supersample
    xx, yy = np.meshgrid(c, c)
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= radius**2


def _coverage(xx, yy, center, radius: float) -> np.ndarray:
    d = np.hypot(xx - center[0], yy - center[1])
    return np.clip(radius - d + 0.5, 0.0, 1.0)[..., None]


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _make_track(rng, p: SynthParams, side: Side, obj_center, obj_radius, contact_at: Optional[int], near_miss: bool):
    radius = _uniform(rng, p.hand_radius)
    speed = _uniform(rng, p.hand_speed)
    gap0 = _uniform(rng, p.approach_gap)
    base = math.pi if side == Side.LEFT else 0.0
    ang = base + rng.uniform(-math.pi / 4, math.pi / 4)
    u = (math.cos(ang), math.sin(ang))
    dist = obj_radius + radius + gap0
    start = (obj_center[0] + u[0] * dist, obj_center[1] + u[1] * dist)
    dwell = int(rng.integers(p.dwell[0], p.dwell[1] + 1))
    if near_miss:
        stop_gap = rng.uniform(1.5, 3.0)
        n = max(int(math.floor((gap0 - stop_gap) / speed)), 0)
        move_start = int(rng.integers(2, p.num_frames - n - dwell - 8))
    else:
        n = frames_to_contact(gap0, speed)
        move_start = contact_at - n
    return HandTrack(side, start, (-u[0], -u[1]), speed, move_start, n, dwell, radius)


def _contact_frames(rng, p: SynthParams, count: int) -> list[int]:
    # leave room for a full approach before and hold + retreat after
    lo, hi = 12, p.num_frames - p.dwell[1] - 10
    while True:
        frames = sorted(int(f) for f in rng.integers(lo, hi + 1, size=count))
        if all(b - a >= p.min_event_gap for a, b in zip(frames, frames[1:])):
            return frames


@dataclass(frozen=True)
class Scene:
    """World-space layout and appearance of one sequence."""

    obj_center: tuple[float, float]
    obj_radius: float
    tracks: dict
    grasp_category: dict
    tone: dict
    obj_color: np.ndarray
    stripe_freq: float
    background: np.ndarray

    def touch_frames(self, num_frames: int) -> dict:
        return {
            side: first_contact_frame(tr, self.obj_center, self.obj_radius, num_frames)
            for side, tr in self.tracks.items()
        }

    def in_contact(self, side: Side, k: int) -> bool:
        tr = self.tracks[side]
        return disc_gap(tr.position(k), tr.radius, self.obj_center, self.obj_radius) <= CONTACT_EPS


def build_scene(p: SynthParams, rng: np.random.Generator) -> Scene:
    S = p.frame_size
    obj_radius = _uniform(rng, p.object_radius)
    obj_center = (S / 2 + rng.uniform(-2, 2), S / 2 + rng.uniform(-2, 2))
    n_events = int(rng.integers(p.num_events[0], p.num_events[1] + 1))
    contacts = _contact_frames(rng, p, n_events)
    if n_events == 2:
        sides = [Side.LEFT, Side.RIGHT] if rng.random() < 0.5 else [Side.RIGHT, Side.LEFT]
        tracks = {sides[i]: _make_track(rng, p, sides[i], obj_center, obj_radius, contacts[i], False) for i in range(2)}
    else:
        side = Side.LEFT if rng.random() < 0.5 else Side.RIGHT
        other = Side.RIGHT if side == Side.LEFT else Side.LEFT
        tracks = {side: _make_track(rng, p, side, obj_center, obj_radius, contacts[0], False)}
        if rng.random() < p.near_miss_prob:
            tracks[other] = _make_track(rng, p, other, obj_center, obj_radius, None, True)
    return Scene(
        obj_center=obj_center,
        obj_radius=obj_radius,
        tracks=tracks,
        grasp_category={side: int(rng.integers(1, 9)) for side in Side},
        tone={side: rng.uniform(0.9, 1.1) for side in Side},
        obj_color=rng.uniform(0.2, 0.9, size=3),
        stripe_freq=rng.uniform(0.6, 1.4),
        background=cv2.resize(rng.uniform(0.15, 0.55, size=(4, 4, 3)), (S, S), interpolation=cv2.INTER_CUBIC),
    )


def generate_sequence(params: SynthParams, video_id: Optional[str] = None):
    """Render one sequence; returns (VideoAnnotation, uint8 frames of shape (T, S, S, 3))."""
    p = params
    rng = np.random.default_rng(p.seed)
    S, T = p.frame_size, p.num_frames
    scene = build_scene(p, rng)
    tracks, obj_center, obj_radius = scene.tracks, scene.obj_center, scene.obj_radius

    events = sorted(f for f in scene.touch_frames(T).values() if f is not None)

    c = np.arange(S) + 0.5
    xx, yy = np.meshgrid(c, c)
    frames = np.empty((T, S, S, 3), dtype=np.uint8)
    boxes, grasp = [], []
    for k in range(T):
        jx, jy = rng.normal(0.0, p.camera_jitter, size=2) if p.camera_jitter > 0 else (0.0, 0.0)
        img = scene.background.copy()
        in_contact = {side: scene.in_contact(side, k) for side in tracks}
        oc = (obj_center[0] + jx, obj_center[1] + jy)
        stripes = 0.8 + 0.2 * np.sin(scene.stripe_freq * (xx + yy))[..., None]
        color = scene.obj_color * stripes
        if any(in_contact.values()):
            color = 0.7 * color + 0.3
        cov = _coverage(xx, yy, oc, obj_radius)
        img = img * (1 - cov) + color * cov

        pair_boxes, pair_grasp = [], []
        for side in (Side.LEFT, Side.RIGHT):
            tr = tracks.get(side)
            if tr is None:
                pair_boxes.append(HandBox.absent(side))
                pair_grasp.append(None)
                continue
            hx, hy = tr.position(k)
            hc = (hx + jx, hy + jy)
            cov = _coverage(xx, yy, hc, tr.radius)
            img = img * (1 - cov) + SKIN * scene.tone[side] * cov
            g = scene.grasp_category[side] if in_contact[side] else 0
            if g:
                core = _coverage(xx, yy, hc, tr.radius * (0.35 + 0.03 * g))
                img = img * (1 - 0.6 * core)
            box = HandBox(hc[0] - tr.radius, hc[1] - tr.radius, hc[0] + tr.radius, hc[1] + tr.radius, side, True)
            box = box.clamped(S, S)
            pair_boxes.append(box)
            pair_grasp.append(g if box.present else None)

        if p.noise_std > 0:
            img = img + rng.normal(0.0, p.noise_std, size=img.shape)
        if rng.random() < p.blur_prob:
            img = cv2.GaussianBlur(img, (3, 3), 0.8)
        frames[k] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
        boxes.append(tuple(pair_boxes))
        grasp.append(tuple(pair_grasp))

    ann = VideoAnnotation(
        video_id=video_id or f"{p.id_prefix}{p.seed}",
        frame_count=T,
        fps=p.fps,
        events=tuple(TouchEvent(f) for f in events),
        hand_boxes=tuple(boxes),
        grasp_labels=tuple(grasp),
    )
    return ann, frames


def video_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(n_videos: int, params: SynthParams):
    if n_videos < 1:
        raise ValueError("n_videos must be ≥ 1")
    out = []
    for i, s in enumerate(video_seeds(params.seed, n_videos)):
        sub = SynthParams(**{**params.__dict__, "seed": s})
        out.append(generate_sequence(sub, video_id=f"{params.id_prefix}{i:04d}"))
    return out


def write_dataset(items, out_dir: str | Path) -> Path:
    """Write ``annotations.jsonl`` plus ``frames/<video_id>.npy`` (uint8, T×H×W×3)."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    save_annotations([a for a, _ in items], out / "annotations.jsonl")
    for ann, frames in items:
        np.save(out / "frames" / f"{ann.video_id}.npy", frames)
    return out


def read_dataset(data_dir: str | Path):
    """Inverse of :func:`write_dataset`: (annotations, {video_id: frames})."""
    root = Path(data_dir)
    anns = load_annotations(root / "annotations.jsonl")
    frames = {a.video_id: np.load(root / "frames" / f"{a.video_id}.npy") for a in anns}
    return anns, frames
