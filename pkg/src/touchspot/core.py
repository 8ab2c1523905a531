"""Domain types, configuration record and seeded randomness shared by every module."""

from __future__ import annotations

import dataclasses
import enum
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np
import yaml

TOUCH = "touch"
NUM_GRASP_CLASSES = 9


class SpotError(Exception):
    """Base class for all errors raised by touchspot."""


class ConfigError(SpotError):
    pass


class AnnotationError(SpotError):
    pass


class ShapeError(SpotError):
    pass


class NonFiniteError(SpotError):
    pass


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class HandBox:
    x1: float = 0.0
    y1: float = 0.0
    x2: float = 0.0
    y2: float = 0.0
    side: Side = Side.LEFT
    present: bool = False

    def __post_init__(self):
        object.__setattr__(self, "side", Side(self.side))
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.present and not (self.x1 < self.x2 and self.y1 < self.y2):
            raise AnnotationError(
                f"degenerate {self.side.value} hand box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @classmethod
    def absent(cls, side: Side | str) -> "HandBox":
        return cls(side=Side(side), present=False)

    def clamped(self, width: float, height: float) -> "HandBox":
        """Clip to the image; a box that ends up empty is reported as absent."""
        if not self.present:
            return self
        x1, x2 = min(max(self.x1, 0.0), width), min(max(self.x2, 0.0), width)
        y1, y2 = min(max(self.y1, 0.0), height), min(max(self.y2, 0.0), height)
        if x1 >= x2 or y1 >= y2:
            return HandBox.absent(self.side)
        return HandBox(x1, y1, x2, y2, self.side, True)

    def as_list(self) -> Optional[list[float]]:
        if not self.present:
            return None
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True, order=True)
class TouchEvent:
    frame: int
    cls: str = TOUCH

    def __post_init__(self):
        if int(self.frame) != self.frame or self.frame < 0:
            raise AnnotationError(f"event frame must be a non-negative integer, got {self.frame!r}")
        if self.cls != TOUCH:
            raise AnnotationError(f"unsupported event class {self.cls!r}")
        object.__setattr__(self, "frame", int(self.frame))


@dataclass(frozen=True)
class EventDetection:
    frame: float
    confidence: float
    cls: str = TOUCH

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.frame < 0:
            raise ValueError(f"negative detection frame {self.frame}")


def _frozen_array(a, dtype=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ClipSample:
    """An L-frame training window with clip-relative events.

    ``frames`` is float32 (L, H, W, 3) in [0, 1]; ``grasp_labels`` is an (L, 2)
    int array with -1 standing in for "no label".
    """

    frames: np.ndarray
    hand_boxes: tuple[tuple[HandBox, HandBox], ...]
    events: tuple[TouchEvent, ...]
    grasp_labels: np.ndarray
    video_id: str = ""
    start: int = 0

    def __post_init__(self):
        frames = _frozen_array(self.frames, np.float32)
        grasp = _frozen_array(self.grasp_labels, np.int64)
        L = len(frames)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be (L, H, W, 3), got {frames.shape}")
        if len(self.hand_boxes) != L or grasp.shape != (L, 2):
            raise ShapeError("hand_boxes / grasp_labels length must equal the frame count")
        for ev in self.events:
            if not 0 <= ev.frame < L:
                raise AnnotationError(f"clip event at {ev.frame} outside [0, {L})")
        for t, pair in enumerate(self.hand_boxes):
            for h, box in enumerate(pair):
                if grasp[t, h] >= 0 and not box.present:
                    raise AnnotationError(f"grasp label without a hand box at clip frame {t}")
                if grasp[t, h] >= NUM_GRASP_CLASSES:
                    raise AnnotationError(f"grasp label {grasp[t, h]} out of range")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "grasp_labels", grasp)
        object.__setattr__(self, "hand_boxes", tuple(tuple(p) for p in self.hand_boxes))
        object.__setattr__(self, "events", tuple(sorted(self.events)))

    @property
    def length(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SpotConfig:
    """Every hyperparameter of a run.

    Fields left as ``None`` resolve from the displacement window; use the
    ``sigma`` / ``tor_sigma_value`` / ``nms_window_value`` properties to read
    effective values.
    """

    clip_length: int = 40
    displacement_window: int = 4
    soft_label_sigma: Optional[float] = None
    use_soft_labels: bool = True
    loss_kind: str = "focal"
    focal_alpha: float = 0.9
    focal_gamma: float = 2.0
    ce_weight: float = 5.0
    lambda_g: float = 0.2
    patch_scale: float = 1.2
    patch_size: int = 224
    frame_size: int = 224
    feature_dim: int = 768
    backbone_width: int = 32
    backbone_downscale: int = 8
    num_heads: int = 4
    ffn_expansion: int = 2
    temporal_scales: int = 2
    tolerances: tuple[int, ...] = (0, 1, 2)
    tor_sigma: Optional[float] = None
    use_tor: bool = True
    nms_kind: str = "soft"
    nms_window: Optional[int] = None
    snms_sigma: float = 1.0
    confidence_floor: float = 0.01
    event_bias: float = 0.75
    batch_size: int = 6
    clips_per_epoch: int = 5000
    epochs: int = 50
    learning_rate: float = 4e-4
    weight_decay: float = 0.01
    warmup_epochs: int = 3
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tolerances", tuple(int(t) for t in self.tolerances))

    @property
    def sigma(self) -> float:
        if self.soft_label_sigma is not None:
            return float(self.soft_label_sigma)
        return max(self.displacement_window / 2.0, 0.5)

    @property
    def tor_sigma_value(self) -> float:
        if self.tor_sigma is not None:
            return float(self.tor_sigma)
        return float(self.displacement_window) if self.displacement_window > 0 else 1.0

    @property
    def nms_window_value(self) -> int:
        if self.nms_window is not None:
            return int(self.nms_window)
        return 2 * self.displacement_window + 1

    def replace(self, **changes) -> "SpotConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["tolerances"] = list(self.tolerances)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SpotConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


LOSS_KINDS = ("focal", "weighted_ce")
NMS_KINDS = ("none", "hard", "soft")

# Desk-scale preset; the dataclass defaults are the full-scale values.
DESK_PRESET = dict(
    clip_length=16,
    patch_size=32,
    frame_size=32,
    feature_dim=32,
    backbone_width=16,
    batch_size=8,
    epochs=10,
    clips_per_epoch=400,
    learning_rate=2e-3,
    warmup_epochs=1,
)


def desk_config(**overrides) -> SpotConfig:
    return SpotConfig(**{**DESK_PRESET, **overrides})


def validate_config(cfg: SpotConfig) -> list[str]:
    """Return every violated invariant as a message; an empty list means valid."""
    problems = []
    w = cfg.displacement_window
    if cfg.clip_length < 1:
        problems.append("clip_length must be positive")
    if w < 0:
        problems.append("displacement_window must be non-negative")
    if cfg.clip_length < 2 * w + 1:
        problems.append("L must be ≥ 2w+1")
    if cfg.sigma <= 0:
        problems.append("soft_label_sigma must be > 0")
    if cfg.tor_sigma_value <= 0:
        problems.append("tor_sigma must be > 0")
    if cfg.snms_sigma <= 0:
        problems.append("snms_sigma must be > 0")
    if cfg.nms_window_value < 1:
        problems.append("nms_window must be ≥ 1")
    if cfg.loss_kind not in LOSS_KINDS:
        problems.append(f"loss_kind must be one of {LOSS_KINDS}")
    if cfg.nms_kind not in NMS_KINDS:
        problems.append(f"nms_kind must be one of {NMS_KINDS}")
    if cfg.patch_scale < 1.0:
        problems.append("patch_scale must be ≥ 1")
    if cfg.patch_size < 1 or cfg.frame_size < 1:
        problems.append("patch_size and frame_size must be positive")
    if cfg.feature_dim % 4:
        problems.append("feature_dim must be divisible by 4")
    if cfg.num_heads < 1 or cfg.feature_dim % cfg.num_heads:
        problems.append("feature_dim must divide evenly across num_heads")
    if cfg.clip_length < 2 ** cfg.temporal_scales:
        problems.append("L must be ≥ 2^temporal_scales")
    if not cfg.tolerances or any(t < 0 for t in cfg.tolerances):
        problems.append("tolerances must be a non-empty list of non-negative integers")
    if not 0.0 <= cfg.event_bias <= 1.0:
        problems.append("event_bias must lie in [0, 1]")
    if not 0.0 <= cfg.val_fraction < 1.0:
        problems.append("val_fraction must lie in [0, 1)")
    return problems


def check_config(cfg: SpotConfig) -> SpotConfig:
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def read_config_values(path: str | Path) -> dict[str, Any]:
    """Raw key-value pairs of a YAML config file, checked against the SpotConfig fields."""
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a key-value mapping")
    known = {f.name for f in dataclasses.fields(SpotConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
    return raw


def load_config(path: str | Path, **overrides) -> SpotConfig:
    raw = read_config_values(path)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return SpotConfig.from_dict(raw)


def save_config(cfg: SpotConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def seed_everything(seed: int) -> None:
    import torch

    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def config_fields() -> Sequence[dataclasses.Field]:
    return dataclasses.fields(SpotConfig)


def clip_events(frames: Iterable[int], start: int, length: int) -> list[TouchEvent]:
    """Video-relative event frames -> clip-relative events inside [start, start+length)."""
    return [TouchEvent(f - start) for f in frames if start <= f < start + length]
