import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from touchspot.core import AnnotationError, SpotError, desk_config
from touchspot.train import SpotDataset, lr_factor, predict_video, train_model


class WindowPositionModel(nn.Module):
    """Scores each frame by its position inside the window; offsets carry the window start."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg

    def forward(self, frames, patches, present):
        B, L = frames.shape[:2]
        # frames encode their video index in the red channel of pixel (0, 0)
        idx = torch.round(frames[:, :, 0, 0, 0] * 255)
        pos = torch.arange(L, dtype=torch.float64).expand(B, L)
        return SimpleNamespace(touch=pos / L, y_d=idx[:, :1].double().expand(B, L))


def test_overlapping_windows_combine_by_max(tiny_data):
    anns, frames = tiny_data
    cfg = desk_config()
    ds = SpotDataset(anns[:1], frames, cfg)
    T = anns[0].frame_count
    ds.frames[0][:, 0, 0, 0] = np.arange(T, dtype=np.uint8)
    scores, offsets = predict_video(WindowPositionModel(cfg), ds, 0)
    L, stride = cfg.clip_length, cfg.clip_length // 2
    starts = sorted(set(list(range(0, T - L + 1, stride)) + [T - L]))
    for t in range(T):
        cover = [s for s in starts if s <= t < s + L]
        best = max(cover, key=lambda s: ((t - s) / L, -s))
        assert scores[t] == pytest.approx((t - best) / L)
        assert offsets[t] == best


def test_short_video_is_padded(tiny_data):
    anns, frames = tiny_data
    cfg = desk_config(clip_length=16)
    ds = SpotDataset(anns[:1], frames, cfg)
    model = WindowPositionModel(cfg.replace(clip_length=80, displacement_window=4))
    scores, _ = predict_video(model, ds, 0)
    assert len(scores) == anns[0].frame_count


def test_lr_schedule():
    assert lr_factor(0, 10, 100) == pytest.approx(0.1)
    assert lr_factor(9, 10, 100) == pytest.approx(1.0)
    assert lr_factor(10, 10, 100) == pytest.approx(1.0)
    assert lr_factor(55, 10, 100) == pytest.approx(0.5)
    assert lr_factor(100, 10, 100) == pytest.approx(0.0, abs=1e-12)
    vals = [lr_factor(s, 10, 100) for s in range(10, 100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_dataset_rejects_wrong_frame_size(tiny_data):
    anns, frames = tiny_data
    with pytest.raises(SpotError, match="frame size"):
        SpotDataset(anns, frames, desk_config(frame_size=64))


def test_sample_batch_shapes(tiny_data):
    anns, frames = tiny_data
    cfg = desk_config()
    b = SpotDataset(anns, frames, cfg).sample_batch(np.random.default_rng(0), 3)
    L = cfg.clip_length
    assert b["frames"].shape == (3, L, 3, 32, 32) and b["patches"].shape == (3, L, 2, 3, 32, 32)
    assert b["y_c"].shape == (3, L, 2) and torch.allclose(b["y_c"].sum(-1), torch.ones(3, L))
    assert b["y_g"].shape == (3, L, 2) and b["g_mask"].dtype == torch.bool
    assert 0 <= b["frames"].min() and b["frames"].max() <= 1


def test_overlapping_train_and_val_refused(tiny_data, tiny_cfg):
    anns, frames = tiny_data
    ds = SpotDataset(anns, frames, tiny_cfg)
    with pytest.raises(AnnotationError):
        train_model(tiny_cfg, ds, SpotDataset(anns[:2], frames, tiny_cfg))


def test_training_logs_and_best_checkpoint(tiny_data, tiny_cfg, tmp_path):
    anns, frames = tiny_data
    seen = []
    res = train_model(
        tiny_cfg, SpotDataset(anns[:4], frames, tiny_cfg), SpotDataset(anns[4:], frames, tiny_cfg), tmp_path, seen.append
    )
    assert [r["epoch"] for r in res.history] == [0, 1] and seen == res.history
    assert res.best_map == max(r["val_map"] for r in res.history)
    for r in res.history:
        assert math.isclose(r["total"], r["cls"] + r["disp"] + tiny_cfg.lambda_g * r["grasp"], rel_tol=1e-6)
    assert (tmp_path / "checkpoint.pt").exists()
