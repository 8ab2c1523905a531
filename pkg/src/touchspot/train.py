"""Training loop, sliding-window inference and ablation runs."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .core import SpotConfig, SpotError, check_config, make_rng, seed_everything
from .data import VideoAnnotation, assert_disjoint, sample_window, split_by_video, video_hand_patches
from .evaluation import evaluate_videos
from .model import TouchSpotter, save_checkpoint
from .postprocess import postprocess
from .supervision import build_targets, compute_losses

log = logging.getLogger(__name__)


class SpotDataset:
    """Frames and pre-extracted hand patches for a set of videos, stored as uint8."""

    def __init__(self, annotations: Sequence[VideoAnnotation], frames: Mapping[str, np.ndarray], cfg: SpotConfig):
        self.annotations = list(annotations)
        self.cfg = cfg
        self.frames, self.patches, self.present = [], [], []
        for ann in self.annotations:
            video = np.asarray(frames[ann.video_id])
            if video.shape[0] != ann.frame_count:
                raise SpotError(f"{ann.video_id}: {video.shape[0]} frames on disk, annotation says {ann.frame_count}")
            if video.shape[1:3] != (cfg.frame_size, cfg.frame_size):
                raise SpotError(f"{ann.video_id}: frame size {video.shape[1:3]} ≠ config frame_size {cfg.frame_size}")
            if video.dtype != np.uint8:
                video = np.round(np.clip(video, 0, 1) * 255).astype(np.uint8)
            patches = video_hand_patches(video, ann, cfg.patch_scale, cfg.patch_size)
            self.frames.append(np.ascontiguousarray(video.transpose(0, 3, 1, 2)))
            self.patches.append(np.round(patches * 255).astype(np.uint8).transpose(0, 1, 4, 2, 3).copy())
            self.present.append(ann.present_array())

    def __len__(self):
        return len(self.annotations)

    def window(self, vi: int, start: int, length: int):
        sl = slice(start, start + length)
        return self.frames[vi][sl], self.patches[vi][sl], self.present[vi][sl]

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        L = cfg.clip_length
        cols = {k: [] for k in ("frames", "patches", "present", "y_c", "y_d", "d_mask", "y_g", "g_mask")}
        for _ in range(batch_size):
            vi, start = sample_window(self.annotations, cfg, rng)
            ann = self.annotations[vi]
            fr, pa, pr = self.window(vi, start, L)
            events = [f - start for f in ann.event_frames if start <= f < start + L]
            tg = build_targets(events, ann.grasp_array()[start : start + L], cfg)
            cols["frames"].append(fr)
            cols["patches"].append(pa)
            cols["present"].append(pr)
            cols["y_c"].append(tg.y_c_soft)
            cols["y_d"].append(tg.y_d)
            cols["d_mask"].append(tg.d_mask)
            cols["y_g"].append(tg.y_g)
            cols["g_mask"].append(tg.g_mask)
        return collate(cols)


def collate(cols) -> dict[str, torch.Tensor]:
    out = {
        "frames": torch.from_numpy(np.stack(cols["frames"])).float() / 255.0,
        "patches": torch.from_numpy(np.stack(cols["patches"])).float() / 255.0,
        "present": torch.from_numpy(np.stack(cols["present"])),
        "y_c": torch.from_numpy(np.stack(cols["y_c"])).float(),
        "y_d": torch.from_numpy(np.stack(cols["y_d"])).float(),
        "d_mask": torch.from_numpy(np.stack(cols["d_mask"])),
        "y_g": torch.from_numpy(np.stack(cols["y_g"])).long(),
        "g_mask": torch.from_numpy(np.stack(cols["g_mask"])),
    }
    return out


def lr_factor(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warm-up then cosine annealing to zero."""
    if warmup_steps and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return 0.5 * (1 + math.cos(math.pi * min(step - warmup_steps, span) / span))


@torch.no_grad()
def predict_video(model: TouchSpotter, ds: SpotDataset, vi: int, batch: int = 32):
    """Sliding windows with stride L/2; overlapping scores combine by max.

    Returns (touch scores, offsets) of length T. Each frame's offset comes
    from the window that supplied its max score.
    """
    L = model.cfg.clip_length
    T = ds.annotations[vi].frame_count
    fr, pa, pr = ds.frames[vi], ds.patches[vi], ds.present[vi]
    if T < L:
        pad = L - T
        fr = np.concatenate([fr, np.zeros((pad, *fr.shape[1:]), fr.dtype)])
        pa = np.concatenate([pa, np.zeros((pad, *pa.shape[1:]), pa.dtype)])
        pr = np.concatenate([pr, np.zeros((pad, *pr.shape[1:]), pr.dtype)])
    n = len(fr)
    stride = max(L // 2, 1)
    starts = list(range(0, n - L + 1, stride))
    if starts[-1] != n - L:
        starts.append(n - L)
    scores = np.full(n, -1.0)
    offsets = np.zeros(n)
    was_training = model.training
    model.eval()
    for b in range(0, len(starts), batch):
        chunk = starts[b : b + batch]
        frames = torch.from_numpy(np.stack([fr[s : s + L] for s in chunk])).float() / 255.0
        patches = torch.from_numpy(np.stack([pa[s : s + L] for s in chunk])).float() / 255.0
        present = torch.from_numpy(np.stack([pr[s : s + L] for s in chunk]))
        out = model(frames, patches, present)
        touch = out.touch.double().numpy()
        disp = out.y_d.double().numpy()
        for s, sc, dp in zip(chunk, touch, disp):
            better = sc > scores[s : s + L]
            scores[s : s + L] = np.where(better, sc, scores[s : s + L])
            offsets[s : s + L] = np.where(better, dp, offsets[s : s + L])
    model.train(was_training)
    return scores[:T], offsets[:T]


def predict_dataset(model: TouchSpotter, ds: SpotDataset) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {ann.video_id: predict_video(model, ds, i) for i, ann in enumerate(ds.annotations)}


def detections_from_scores(scores, cfg: SpotConfig, use_tor=None, nms=None):
    return {vid: postprocess(s, o, cfg, use_tor=use_tor, nms=nms) for vid, (s, o) in scores.items()}


def ground_truth(annotations: Sequence[VideoAnnotation]) -> dict[str, list[int]]:
    return {a.video_id: a.event_frames for a in annotations}


def evaluate_scores(scores, annotations, cfg: SpotConfig, use_tor=None, nms=None):
    dets = detections_from_scores(scores, cfg, use_tor, nms)
    return evaluate_videos(dets, ground_truth(annotations), cfg.tolerances)


def evaluate_model(model, ds: SpotDataset, use_tor=None, nms=None):
    return evaluate_scores(predict_dataset(model, ds), ds.annotations, model.cfg, use_tor, nms)


def random_scores(annotations: Sequence[VideoAnnotation], seed: int):
    rng = make_rng(seed)
    return {a.video_id: (rng.random(a.frame_count), np.zeros(a.frame_count)) for a in annotations}


@dataclass
class TrainResult:
    model: TouchSpotter
    history: list[dict] = field(default_factory=list)
    best_map: float = float("nan")
    best_epoch: int = -1
    seconds: float = 0.0


def train_model(
    cfg: SpotConfig,
    train_ds: SpotDataset,
    val_ds: Optional[SpotDataset] = None,
    out_dir: Optional[str | Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Sample → forward → loss → AdamW step, with per-epoch logging.

    When ``val_ds`` is given the returned model carries the weights of the
    epoch with the best validation mAP; otherwise the final weights.
    """
    check_config(cfg)
    if val_ds is not None:
        assert_disjoint(train_ds.annotations, val_ds.annotations)
    seed_everything(cfg.seed)
    t0 = time.perf_counter()
    model = TouchSpotter(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(cfg.clips_per_epoch // cfg.batch_size, 1)
    total = steps_per_epoch * cfg.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_factor(s, cfg.warmup_epochs * steps_per_epoch, total)
    )
    rng = make_rng(cfg.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")

    result = TrainResult(model)
    best_state = None
    model.train()
    for epoch in range(cfg.epochs):
        sums = {"total": 0.0, "cls": 0.0, "disp": 0.0, "grasp": 0.0}
        for _ in range(steps_per_epoch):
            batch = train_ds.sample_batch(rng, cfg.batch_size)
            outp = model(batch["frames"], batch["patches"], batch["present"])
            parts = compute_losses(outp, batch, cfg)
            opt.zero_grad(set_to_none=True)
            parts["total"].backward()
            opt.step()
            sched.step()
            for k in sums:
                sums[k] += parts[k].item()
        rec = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}, "lr": sched.get_last_lr()[0]}
        if val_ds is not None and len(val_ds):
            m, per = evaluate_model(model, val_ds)
            rec["val_map"] = m
            if best_state is None or m > result.best_map:
                result.best_map, result.best_epoch = m, epoch
                best_state = copy.deepcopy(model.state_dict())
        result.history.append(rec)
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in rec.items() if k != "epoch"})
        if on_epoch:
            on_epoch(rec)
        if out:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    result.seconds = time.perf_counter() - t0
    if out:
        save_checkpoint(model, out / "checkpoint.pt", best_epoch=result.best_epoch, best_map=result.best_map)
    return result


def train_with_split(cfg: SpotConfig, annotations, frames, out_dir=None) -> tuple[TrainResult, SpotDataset]:
    """Split off a validation subset by video id, then train."""
    train_anns, val_anns = split_by_video(annotations, cfg.val_fraction, cfg.seed)
    train_ds = SpotDataset(train_anns, frames, cfg)
    val_ds = SpotDataset(val_anns, frames, cfg) if val_anns else None
    return train_model(cfg, train_ds, val_ds, out_dir), train_ds


# -- ablations -------------------------------------------------------------

COMPONENT_ROWS = {
    "Proposed": dict(),
    "w/o Grasp Loss": dict(lambda_g=0.0),
    "w/o Gauss-TOR": dict(use_tor=False),
    "w/o Soft Label": dict(use_soft_labels=False),
    "only HiCE": dict(lambda_g=0.0, use_soft_labels=False, use_tor=False),
}
CLIP_LENGTHS = (25, 40, 50, 80)
CONTEXT_SCALES = (1.0, 1.2, 1.5)
AXES = ("components", "clip_length", "context")

# fields that only affect post-processing; runs differing only in these share a model
_POST_ONLY = ("use_tor", "nms_kind", "nms_window", "snms_sigma", "tor_sigma", "confidence_floor")


def ablation_configs(axis: str, cfg: SpotConfig, scale: float = 1.0) -> dict[str, SpotConfig]:
    if axis == "components":
        return {name: cfg.replace(**ch) for name, ch in COMPONENT_ROWS.items()}
    if axis == "clip_length":
        out = {}
        for L in CLIP_LENGTHS:
            Ls = max(int(round(L * scale)), 1)
            out[f"L={Ls}" + (" (proposed)" if L == 40 else "")] = cfg.replace(clip_length=Ls)
        return out
    if axis == "context":
        return {
            f"×{s}" + (" (proposed)" if s == 1.2 else ""): cfg.replace(patch_scale=s) for s in CONTEXT_SCALES
        }
    raise SpotError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def _train_key(cfg: SpotConfig):
    d = cfg.to_dict()
    for k in _POST_ONLY:
        d.pop(k)
    return json.dumps(d, sort_keys=True)


def run_ablation(
    axis: str,
    cfg: SpotConfig,
    annotations,
    frames,
    test_annotations,
    test_frames,
    seeds: Sequence[int] = (0,),
    scale: float = 1.0,
    only: Optional[Sequence[str]] = None,
) -> dict[str, tuple[float, dict[int, float]]]:
    """Train and evaluate each configuration of ``axis``; metrics are averaged over ``seeds``.

    ``only`` restricts the run to the named rows.
    """
    assert_disjoint(annotations, test_annotations)
    configs = ablation_configs(axis, cfg, scale)
    if only:
        missing = sorted(set(only) - set(configs))
        if missing:
            raise SpotError(f"unknown rows for axis {axis!r}: {', '.join(missing)}")
        configs = {k: v for k, v in configs.items() if k in only}
    for name, c in configs.items():
        check_config(c)
    rows: dict[str, tuple[float, dict[int, float]]] = {}
    cache: dict[str, dict] = {}
    for name, c in configs.items():
        maps, pers = [], []
        for seed in seeds:
            cs = c.replace(seed=seed)
            key = _train_key(cs)
            if key not in cache:
                res, _ = train_with_split(cs, annotations, frames)
                test_ds = SpotDataset(test_annotations, test_frames, cs)
                cache[key] = predict_dataset(res.model, test_ds)
            m, per = evaluate_scores(cache[key], test_annotations, cs)
            maps.append(m)
            pers.append(per)
        rows[name] = (float(np.mean(maps)), {d: float(np.mean([p[d] for p in pers])) for d in cfg.tolerances})
    return rows
