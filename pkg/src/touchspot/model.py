"""Per-frame backbones, hand-context cross-attention, temporal encoder-decoder and heads.

Tensor layout conventions:
    frames        (B, L, 3, H, W)     float in [0, 1]
    hand patches  (B, L, 2, 3, P, P)  left then right
    feature maps  (N, h, w, C)        channels last, as the attention works on tokens
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .core import NUM_GRASP_CLASSES, NonFiniteError, ShapeError, SpotConfig, check_config

CHECKPOINT_VERSION = 1


def sinusoidal_pos_embedding(h: int, w: int, c: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2D sine/cosine embedding of shape (h, w, c).

    The first c/2 channels encode the row index and the last c/2 the column
    index; within each half, even channels are sines and odd channels cosines
    over geometric frequencies 1 / 10000^(2i / (c/2)).
    """
    if c % 4:
        raise ShapeError(f"positional embedding needs c divisible by 4, got {c}")
    half = c // 2
    freqs = torch.pow(10000.0, -torch.arange(0, half, 2, dtype=torch.float64) / half)

    def axis(n):
        ang = torch.arange(n, dtype=torch.float64)[:, None] * freqs[None, :]
        out = torch.empty(n, half, dtype=torch.float64)
        out[:, 0::2] = torch.sin(ang)
        out[:, 1::2] = torch.cos(ang)
        return out

    rows = axis(h)[:, None, :].expand(h, w, half)
    cols = axis(w)[None, :, :].expand(h, w, half)
    return torch.cat([rows, cols], dim=-1).to(dtype=dtype, device=device)


class ConvBackbone(nn.Module):
    """Small strided conv stack standing in for the ImageNet backbone.

    Each stage halves the resolution; the last stage emits ``out_dim`` channels.
    """

    def __init__(self, in_ch: int, width: int, out_dim: int, downscale: int = 8):
        super().__init__()
        stages = int(round(math.log2(downscale)))
        if 2**stages != downscale or stages < 1:
            raise ShapeError(f"downscale must be a power of two ≥ 2, got {downscale}")
        self.downscale = downscale
        layers, ch = [], in_ch
        for i in range(stages):
            nxt = out_dim if i == stages - 1 else width * 2**i
            layers.append(nn.Conv2d(ch, nxt, 3, stride=2, padding=1))
            if i < stages - 1:
                layers.append(nn.GELU())
            ch = nxt
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class HiCE(nn.Module):
    """Global frame tokens attend to left/right hand-patch tokens.

    Q = f_Q(F + E_pos), K = f_K([F_lh, F_rh] + E_pos + E_id), V = f_V([F_lh, F_rh]),
    F' = out_proj(MHA(Q, K, V)) + F, output = FFN(F') + F'.
    ``out_proj`` and the last FFN layer start at zero, so a fresh module is the identity.
    """

    debug = False

    def __init__(self, dim: int, num_heads: int = 4, ffn_expansion: int = 2):
        super().__init__()
        if dim % num_heads:
            raise ShapeError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim, self.num_heads = dim, num_heads
        self.f_q = nn.Linear(dim, dim)
        self.f_k = nn.Linear(dim, dim)
        self.f_v = nn.Linear(dim, dim)
        self.e_id = nn.Parameter(torch.randn(2, dim) * 0.02)
        self.out_proj = nn.Linear(dim, dim)
        self.ffn = nn.Sequential(nn.Linear(dim, dim * ffn_expansion), nn.GELU(), nn.Linear(dim * ffn_expansion, dim))
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)
        nn.init.zeros_(self.ffn[2].weight)
        nn.init.zeros_(self.ffn[2].bias)
        self.last_attention = None

    def _heads(self, x):
        n, t, _ = x.shape
        return x.view(n, t, self.num_heads, -1).transpose(1, 2)

    def forward(self, feat, left, right, keep_attention: bool = False):
        """feat (N, h, w, C); left/right (N, hp, wp, C) -> (N, h, w, C).

        ``right=None`` attends over the left-hand tokens only.
        """
        N, h, w, C = feat.shape
        if C != self.dim or left.shape[-1] != C or (right is not None and right.shape != left.shape):
            raise ShapeError(f"HiCE expects channel dim {self.dim}, got {tuple(feat.shape)}, {tuple(left.shape)}")
        hp, wp = left.shape[1:3]
        pos = sinusoidal_pos_embedding(h, w, C, feat.dtype, feat.device)
        hand_pos = sinusoidal_pos_embedding(hp, wp, C, feat.dtype, feat.device)

        q_in = (feat + pos).reshape(N, h * w, C)
        hands = [left] if right is None else [left, right]
        k_in = torch.cat([(x + hand_pos + self.e_id[i]).reshape(N, -1, C) for i, x in enumerate(hands)], dim=1)
        v_in = torch.cat([x.reshape(N, -1, C) for x in hands], dim=1)

        q, k, v = self._heads(self.f_q(q_in)), self._heads(self.f_k(k_in)), self._heads(self.f_v(v_in))
        d_head = C // self.num_heads
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_head), dim=-1)
        if self.debug:
            err = (attn.sum(-1) - 1).abs().max().item()
            assert err <= 1e-5, f"attention rows sum to 1 ± {err}"
        if keep_attention:
            self.last_attention = attn.detach()
        ctx = (attn @ v).transpose(1, 2).reshape(N, h * w, C)
        _check_finite(ctx, "hice cross-attention")

        flat = feat.reshape(N, h * w, C)
        mid = self.out_proj(ctx) + flat
        out = self.ffn(mid) + mid
        _check_finite(out, "hice feed-forward")
        return out.view(N, h, w, C)


def _check_finite(x, stage: str):
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values after {stage}")


def _identity_kernel_(conv: nn.Conv1d):
    with torch.no_grad():
        conv.weight.zero_()
        k = conv.kernel_size[0] // 2
        n = min(conv.in_channels, conv.out_channels)
        conv.weight[torch.arange(n), torch.arange(n), k] = 1.0
        if conv.bias is not None:
            conv.bias.zero_()


def _zero_(conv: nn.Conv1d):
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class TemporalBlock(nn.Module):
    def __init__(self, dim: int, kernel: int = 3):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.conv2 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class TemporalEncoderDecoder(nn.Module):
    """Multi-scale temporal context with a U-shaped conv stack.

    Encoder: residual block, then stride-2 conv per scale. Decoder: nearest
    upsampling to the skip's length, conv, additive skip, residual block.
    Output length always equals the input length.
    """

    def __init__(self, dim: int, num_scales: int = 2, kernel: int = 3):
        super().__init__()
        self.num_scales = num_scales
        self.enc = nn.ModuleList(TemporalBlock(dim, kernel) for _ in range(num_scales + 1))
        self.down = nn.ModuleList(nn.Conv1d(dim, dim, kernel, stride=2, padding=kernel // 2) for _ in range(num_scales))
        self.skip = nn.ModuleList(nn.Conv1d(dim, dim, kernel, padding=kernel // 2) for _ in range(num_scales))
        self.up = nn.ModuleList(nn.Conv1d(dim, dim, kernel, padding=kernel // 2) for _ in range(num_scales))
        self.dec = nn.ModuleList(TemporalBlock(dim, kernel) for _ in range(num_scales))

    def identity_init_(self):
        """Centre-tap identity on the through path, zero on residual and upsampling branches."""
        for blk in list(self.enc) + list(self.dec):
            _identity_kernel_(blk.conv1)
            _zero_(blk.conv2)
        for conv in list(self.down) + list(self.skip):
            _identity_kernel_(conv)
        for conv in self.up:
            _zero_(conv)
        return self

    def forward(self, x):
        """x (B, L, C) -> (B, L, C)."""
        L = x.shape[1]
        if L < 2**self.num_scales:
            raise ShapeError(f"clip length {L} too short for {self.num_scales} temporal scales")
        h = x.transpose(1, 2)
        feats = [self.enc[0](h)]
        for i in range(self.num_scales):
            feats.append(self.enc[i + 1](self.down[i](feats[-1])))
        y = feats[-1]
        for i in reversed(range(self.num_scales)):
            skip = feats[i]
            up = F.interpolate(y, size=skip.shape[-1], mode="nearest")
            y = self.dec[i](self.skip[i](skip) + self.up[i](up))
        return y.transpose(1, 2)


@dataclass
class HeadOutputs:
    y_c: torch.Tensor  # (..., L, 2) softmax probabilities, column 1 = touch
    y_d: torch.Tensor  # (..., L) displacement in frames
    y_g: torch.Tensor  # (..., L, 2, 9) grasp logits, left then right
    logits: torch.Tensor

    @property
    def touch(self):
        return self.y_c[..., 1]


class PredictionHeads(nn.Module):
    def __init__(self, dim: int, grasp_hidden: int | None = None):
        super().__init__()
        hid = grasp_hidden or dim
        self.cls = nn.Linear(dim, 2)
        self.disp = nn.Linear(dim, 1)
        self.grasp = nn.Sequential(
            nn.Linear(2 * dim, hid),
            nn.GELU(),
            nn.Linear(hid, hid),
            nn.GELU(),
            nn.Linear(hid, hid),
            nn.GELU(),
            nn.Linear(hid, 2 * NUM_GRASP_CLASSES),
        )

    def forward(self, temporal, hand_feats) -> HeadOutputs:
        """temporal (B, L, C); hand_feats (B, L, 2, C) pooled left/right features."""
        if hand_feats.shape[:2] != temporal.shape[:2] or hand_feats.shape[2] != 2:
            raise ShapeError(f"hand features {tuple(hand_feats.shape)} do not match {tuple(temporal.shape)}")
        logits = self.cls(temporal)
        g = self.grasp(hand_feats.flatten(-2))
        return HeadOutputs(
            y_c=torch.softmax(logits, dim=-1),
            y_d=self.disp(temporal).squeeze(-1),
            y_g=g.view(*g.shape[:-1], 2, NUM_GRASP_CLASSES),
            logits=logits,
        )


def stack_temporal_neighbours(patches):
    """(B, L, 2, 3, P, P) -> (B, L, 2, 9, P, P) with previous/current/next frames on channels."""
    prev = torch.cat([patches[:, :1], patches[:, :-1]], dim=1)
    nxt = torch.cat([patches[:, 1:], patches[:, -1:]], dim=1)
    return torch.cat([prev, patches, nxt], dim=3)


class TouchSpotter(nn.Module):
    def __init__(self, cfg: SpotConfig):
        super().__init__()
        check_config(cfg)
        if cfg.frame_size % cfg.backbone_downscale or cfg.patch_size % cfg.backbone_downscale:
            raise ShapeError("frame_size and patch_size must be multiples of backbone_downscale")
        C = cfg.feature_dim
        self.cfg = cfg
        self.backbone = ConvBackbone(3, cfg.backbone_width, C, cfg.backbone_downscale)
        self.hand_backbone = ConvBackbone(9, cfg.backbone_width, C, cfg.backbone_downscale)
        self.hice = HiCE(C, cfg.num_heads, cfg.ffn_expansion)
        self.temporal = TemporalEncoderDecoder(C, cfg.temporal_scales)
        self.heads = PredictionHeads(C)

    def features(self, frames, patches, present):
        """Global maps (B*L, h, w, C) and hand maps (B*L, 2, hp, wp, C); absent hands are zero maps."""
        B, L, _, H, W = frames.shape
        if H != self.cfg.frame_size or W != self.cfg.frame_size:
            raise ShapeError(f"frames are {H}x{W}, config expects {self.cfg.frame_size}")
        P = patches.shape[-1]
        if P != self.cfg.patch_size or patches.shape[:3] != (B, L, 2):
            raise ShapeError(f"hand patches {tuple(patches.shape)} do not match config")
        glob = self.backbone(frames.reshape(B * L, 3, H, W)).permute(0, 2, 3, 1)
        hands = self.hand_backbone(stack_temporal_neighbours(patches).reshape(B * L * 2, 9, P, P))
        hands = hands.permute(0, 2, 3, 1).reshape(B * L, 2, *hands.shape[2:4], -1)
        hands = hands * present.reshape(B * L, 2, 1, 1, 1).to(hands.dtype)
        return glob, hands

    def forward(self, frames, patches, present) -> HeadOutputs:
        B, L = frames.shape[:2]
        glob, hands = self.features(frames, patches, present)
        enhanced = self.hice(glob, hands[:, 0], hands[:, 1])
        pooled = enhanced.mean(dim=(1, 2)).view(B, L, -1)
        temporal = self.temporal(pooled)
        hand_feats = hands.mean(dim=(2, 3)).view(B, L, 2, -1)
        return self.heads(temporal, hand_feats)


def save_checkpoint(model: TouchSpotter, path: str | Path, **extra) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra,
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, cfg: SpotConfig | None = None) -> TouchSpotter:
    from .core import ConfigError

    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    saved = SpotConfig.from_dict(payload["config"])
    if cfg is not None:
        arch = ("feature_dim", "backbone_width", "backbone_downscale", "num_heads", "ffn_expansion",
                "temporal_scales", "patch_size", "frame_size")
        bad = [k for k in arch if getattr(cfg, k) != getattr(saved, k)]
        if bad:
            raise ConfigError(f"checkpoint/config mismatch on {', '.join(bad)}")
        saved = cfg
    model = TouchSpotter(saved)
    model.load_state_dict(payload["params"])
    return model
