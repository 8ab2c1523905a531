"""Training targets and the multi-task loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import NonFiniteError, SpotConfig

EPS = 1e-8


@dataclass(frozen=True)
class SupervisionTargets:
    y_c_soft: np.ndarray  # (L, 2) background, touch
    y_d: np.ndarray  # (L,)
    d_mask: np.ndarray  # (L,) bool
    y_g: np.ndarray  # (L, 2) int, -1 where absent
    g_mask: np.ndarray  # (L, 2) bool


def build_soft_labels(events: Sequence[int], L: int, w: int, sigma: float, soft: bool = True) -> np.ndarray:
    """Per-frame (background, touch) targets.

    Inside ±w of an event the touch target is the Gaussian exp(-d²/2σ²);
    overlapping windows combine by max. ``soft=False`` gives the hard
    window (touch target 1 everywhere inside ±w).
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    frames = np.arange(L, dtype=np.float64)
    touch = np.zeros(L)
    for t in events:
        d = frames - t
        g = np.exp(-(d**2) / (2 * sigma**2)) if soft else np.ones(L)
        touch = np.maximum(touch, np.where(np.abs(d) <= w, g, 0.0))
    return np.stack([1.0 - touch, touch], axis=-1)


def build_displacement_targets(events: Sequence[int], L: int, w: int):
    """Signed offset to the nearest event (ties to the earlier one) within ±w."""
    y_d = np.zeros(L)
    mask = np.zeros(L, dtype=bool)
    best = np.full(L, np.inf)
    for t in sorted(events):
        for l in range(max(0, t - w), min(L, t + w + 1)):
            if abs(t - l) < best[l]:
                best[l] = abs(t - l)
                y_d[l] = t - l
                mask[l] = True
    return y_d, mask


def build_targets(events: Sequence[int], grasp_labels: np.ndarray, cfg: SpotConfig) -> SupervisionTargets:
    L = cfg.clip_length
    w = cfg.displacement_window
    y_c = build_soft_labels(events, L, w, cfg.sigma, soft=cfg.use_soft_labels)
    y_d, d_mask = build_displacement_targets(events, L, w)
    g = np.asarray(grasp_labels, dtype=np.int64)
    return SupervisionTargets(y_c, y_d, d_mask, g, g >= 0)


def classification_loss(
    y_c: torch.Tensor,
    target: torch.Tensor,
    kind: str = "focal",
    alpha: float = 0.9,
    gamma: float = 2.0,
    ce_weight: float = 5.0,
) -> torch.Tensor:
    """Mean per-frame loss of probabilities ``y_c`` (..., 2) against soft targets.

    focal:        -Σ_c q_c α_c (1 - p_c)^γ log p_c, with α_touch = α, α_bg = 1 - α
    weighted_ce:  -Σ_c q_c w_c log p_c, with w_touch = ce_weight, w_bg = 1
    """
    logp = torch.log(y_c.clamp_min(EPS))
    if kind == "focal":
        cw = y_c.new_tensor([1.0 - alpha, alpha])
        per = -(target * cw * (1.0 - y_c) ** gamma * logp).sum(-1)
    elif kind == "weighted_ce":
        cw = y_c.new_tensor([1.0, ce_weight])
        per = -(target * cw * logp).sum(-1)
    else:
        raise ValueError(f"unknown classification loss {kind!r}")
    return per.mean()


def displacement_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(pred.dtype)
    return ((pred - target) ** 2 * m).sum() / m.sum().clamp_min(1.0)


def grasp_loss(logits: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over unmasked (frame, hand) entries; logits (..., 9), target (...)."""
    m = mask.to(logits.dtype)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.clamp_min(0).reshape(-1), reduction="none")
    return (ce * m.reshape(-1)).sum() / m.sum().clamp_min(1.0)


def total_loss(parts: Mapping[str, torch.Tensor], lambda_g: float) -> torch.Tensor:
    """L_c + L_d + λg·L_g; ``parts`` holds keys cls, disp, grasp."""
    for name in ("cls", "disp", "grasp"):
        if not torch.isfinite(torch.as_tensor(parts[name])).all():
            raise NonFiniteError(f"{name} loss is not finite")
    return parts["cls"] + parts["disp"] + lambda_g * parts["grasp"]


def compute_losses(out, batch: Mapping[str, torch.Tensor], cfg: SpotConfig) -> dict[str, torch.Tensor]:
    """All loss parts plus the total for a model output and a collated batch.

    With λg = 0 the grasp term is not evaluated and reported as exactly 0.
    """
    parts = {
        "cls": classification_loss(
            out.y_c, batch["y_c"], cfg.loss_kind, cfg.focal_alpha, cfg.focal_gamma, cfg.ce_weight
        ),
        "disp": displacement_loss(out.y_d, batch["y_d"], batch["d_mask"]),
    }
    if cfg.lambda_g:
        parts["grasp"] = grasp_loss(out.y_g, batch["y_g"], batch["g_mask"])
    else:
        parts["grasp"] = out.y_c.new_zeros(())
    parts["total"] = total_loss(parts, cfg.lambda_g)
    return parts
