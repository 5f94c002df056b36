"""Tiny text-conditioned video denoising U-Net used as a frozen feature bank.

Three resolution levels sit below the 8x latent grid; each down level runs

    ResBlock -> prompt cross-attention -> temporal self-attention -> ResBlock

and the activation after the level's last residual unit is exposed as a
side output, giving per-frame features at 8x / 16x / 32x of pixel
resolution.  Cross-attention aligns the prompt tokens with the spatial
positions of a frame; temporal attention mixes the same spatial position
across frames (with a learned temporal position table, so frame order is
not interchangeable unless that table is removed).  The up path and the
noise head only matter during generator pretraining -- feature extraction
reads the down-path taps.

`assemble_pyramid` combines the three side outputs with the codec's 4x tap
into the fine-to-coarse pyramid consumed by the mask head.  Spatial sizes
below 1 clamp to 1 (a 16x16 clip's 32x level is a single cell).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from einops import rearrange


@dataclass
class UNetConfig:
    base_channels: int = 32
    level_channels: tuple[int, int, int] = (32, 64, 96)
    attention_heads: int = 2
    temporal_attention: bool = True
    t_max: int = 16
    prompt_channels: int = 64
    time_dim: int = 128


@dataclass
class FeaturePyramid:
    """Fine-to-coarse per-frame features; keys are pixel downsample factors."""

    levels: dict[int, torch.Tensor] = field(default_factory=dict)  # factor -> (T, h, w, C)

    factors = (4, 8, 16, 32)

    def __getitem__(self, factor: int) -> torch.Tensor:
        return self.levels[factor]

    @property
    def num_frames(self) -> int:
        return next(iter(self.levels.values())).shape[0]


def sinusoidal_embedding(steps: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1e4) * torch.arange(half, device=steps.device) / max(half - 1, 1))
    args = steps.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class PromptCrossAttention(nn.Module):
    """Spatial positions of each frame attend to that frame's prompt tokens."""

    def __init__(self, channels: int, prompt_channels: int, heads: int):
        super().__init__()
        self.norm = _norm(channels)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=prompt_channels, vdim=prompt_channels, batch_first=True
        )

    def forward(self, x, prompts):
        if prompts.shape[-1] != self.attn.kdim:
            raise ValueError(
                f"prompt channels {prompts.shape[-1]} do not match cross-attention width {self.attn.kdim}"
            )
        t, c, h, w = x.shape
        q = rearrange(self.norm(x), "t c h w -> t (h w) c")
        out = self.attn(q, prompts, prompts, need_weights=False)[0]
        return x + rearrange(out, "t (h w) c -> t c h w", h=h, w=w)


class TemporalSelfAttention(nn.Module):
    """Each spatial position attends across frames."""

    def __init__(self, channels: int, heads: int, t_max: int):
        super().__init__()
        self.norm = _norm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.time_pos = nn.Parameter(torch.zeros(t_max, channels))
        nn.init.normal_(self.time_pos, std=0.02)

    def forward(self, x, use_positions: bool = True):
        t, c, h, w = x.shape
        if t > self.time_pos.shape[0]:
            raise ValueError(f"clip length {t} exceeds temporal table {self.time_pos.shape[0]}")
        seq = rearrange(x, "t c h w -> (h w) t c")
        if use_positions:
            seq = seq + self.time_pos[:t]
        normed = self.norm_seq(seq)
        out = self.attn(normed, normed, normed, need_weights=False)[0]
        return x + rearrange(out, "(h w) t c -> t c h w", h=h, w=w)

    def norm_seq(self, seq):
        # GroupNorm expects (N, C, *): fold the channel axis accordingly
        b, t, c = seq.shape
        return self.norm(seq.reshape(b * t, c, 1)).reshape(b, t, c)


class DownLevel(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: UNetConfig, downsample: bool):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1) if downsample else None
        self.res1 = ResBlock(out_ch, cfg.time_dim)
        self.cross = PromptCrossAttention(out_ch, cfg.prompt_channels, cfg.attention_heads)
        self.temporal = TemporalSelfAttention(out_ch, cfg.attention_heads, cfg.t_max)
        self.res2 = ResBlock(out_ch, cfg.time_dim)

    def forward(self, x, prompts, temb, temporal_on: bool, temporal_positions: bool = True):
        if self.down is not None:
            x = self.down(x)
        x = self.res1(x, temb)
        x = self.cross(x, prompts)
        if temporal_on:
            x = self.temporal(x, use_positions=temporal_positions)
        return self.res2(x, temb)


class UpLevel(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.fuse = nn.Conv2d(out_ch * 2, out_ch, 3, padding=1)
        self.res = ResBlock(out_ch, time_dim)

    def forward(self, x, skip, temb):
        x = self.conv(self.up(x))
        if x.shape[-2:] != skip.shape[-2:]:
            # levels clamped at 1x1 cannot be upsampled apart again
            x = torch.nn.functional.interpolate(x, size=skip.shape[-2:], mode="nearest")
        x = self.fuse(torch.cat([x, skip], dim=1))
        return self.res(x, temb)


class VideoUNet(nn.Module):
    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        c0, c1, c2 = self.cfg.level_channels
        self.in_conv = nn.Conv2d(4, c0, 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(self.cfg.base_channels, self.cfg.time_dim),
            nn.SiLU(),
            nn.Linear(self.cfg.time_dim, self.cfg.time_dim),
        )
        self.levels = nn.ModuleList(
            [
                DownLevel(c0, c0, self.cfg, downsample=False),
                DownLevel(c0, c1, self.cfg, downsample=True),
                DownLevel(c1, c2, self.cfg, downsample=True),
            ]
        )
        self.mid = ResBlock(c2, self.cfg.time_dim)
        self.ups = nn.ModuleList([UpLevel(c2, c1, self.cfg.time_dim), UpLevel(c1, c0, self.cfg.time_dim)])
        self.out_norm = _norm(c0)
        self.out_conv = nn.Conv2d(c0, 4, 3, padding=1)
        # zero-init the head so the untrained predictor outputs the zero field
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def _run(self, noisy: torch.Tensor, prompts: torch.Tensor, steps: torch.Tensor, temporal_positions: bool = True):
        if noisy.ndim != 4 or noisy.shape[-1] != 4:
            raise ValueError(f"expected (T, h, w, 4) noisy latents, got {tuple(noisy.shape)}")
        t = noisy.shape[0]
        if t == 0:
            raise ValueError("empty clip")
        if prompts.shape[0] != t:
            raise ValueError(f"prompt frames {prompts.shape[0]} != clip frames {t}")
        temb = self.time_mlp(sinusoidal_embedding(steps.to(noisy.device), self.cfg.base_channels).to(noisy.dtype))
        x = self.in_conv(noisy.permute(0, 3, 1, 2))
        taps = []
        for level in self.levels:
            x = level(x, prompts, temb, self.cfg.temporal_attention, temporal_positions)
            taps.append(x)
        x = self.mid(x, temb)
        x = self.ups[0](x, taps[1], temb)
        x = self.ups[1](x, taps[0], temb)
        eps = self.out_conv(torch.nn.functional.silu(self.out_norm(x)))
        return eps.permute(0, 2, 3, 1), [tap.permute(0, 2, 3, 1) for tap in taps]

    def forward(self, noisy, prompts, steps):
        """Noise prediction for generator pretraining: (T, h, w, 4)."""
        return self._run(noisy, prompts, steps)[0]

    def extract_features(self, noisy, prompts, step: int = 0, temporal_positions: bool = True):
        """Side outputs [8x, 16x, 32x of pixels], each (T, h, w, C_l)."""
        steps = torch.full((noisy.shape[0],), int(step), dtype=torch.long)
        return self._run(noisy, prompts, steps, temporal_positions)[1]


def assemble_pyramid(side_outputs: list[torch.Tensor], feat4x: torch.Tensor) -> FeaturePyramid:
    """Join codec tap (4x) with U-Net side outputs (8x/16x/32x); no copies."""
    if len(side_outputs) != 3:
        raise ValueError(f"expected 3 side outputs, got {len(side_outputs)}")
    t, h4, w4 = feat4x.shape[:3]
    height, width = 4 * h4, 4 * w4
    levels = {4: feat4x}
    for tensor, factor in zip(side_outputs, (8, 16, 32)):
        expect = (max(1, height // factor), max(1, width // factor))
        if tensor.shape[0] != t:
            raise ValueError(f"level {factor}x has {tensor.shape[0]} frames, expected {t}")
        if tuple(tensor.shape[1:3]) != expect:
            raise ValueError(
                f"level {factor}x spatial {tuple(tensor.shape[1:3])} inconsistent with {height}x{width} frames"
            )
        levels[factor] = tensor
    return FeaturePyramid(levels=levels)
