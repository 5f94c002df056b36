"""Frame autoencoder: pixels -> 4-channel latents at 1/8 resolution and back.

Three stride-2 conv stages reach the 8x latent grid; the activation after
stage 2 is exposed as a 4x feature tap (C4 channels) that later completes
the feature pyramid.  Strictly per-frame: frames ride the batch dimension,
so there is no temporal mixing anywhere in the codec.

Public tensors are channel-last: clips are (T, H, W, 3) in [0, 1], latents
are (T, H/8, W/8, 4), the tap is (T, H/4, W/4, C4).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

LATENT_CHANNELS = 4
TAP_CHANNELS = 32


@dataclass
class LatentClip:
    latents: torch.Tensor  # (T, H/8, W/8, 4)
    feat4x: torch.Tensor  # (T, H/4, W/4, C4)


def _as_channel_first(frames: torch.Tensor) -> torch.Tensor:
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected (T, H, W, 3) clip, got {tuple(frames.shape)}")
    return frames.permute(0, 3, 1, 2).contiguous()


class FrameCodec(nn.Module):
    def __init__(self, base: int = 32, tap_channels: int = TAP_CHANNELS):
        super().__init__()
        self.tap_channels = tap_channels
        self.stage1 = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(base, base, 3, padding=1),
            nn.GELU(),
        )
        self.stage2 = nn.Sequential(
            nn.Conv2d(base, base, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(base, tap_channels, 3, padding=1),
            nn.GELU(),
        )
        self.stage3 = nn.Sequential(
            nn.Conv2d(tap_channels, 3 * base, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(3 * base, 3 * base, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(3 * base, LATENT_CHANNELS, 1),
        )
        # The decoder has to recover pixel-sharp edges from the 8x latent
        # grid, so most of its capacity sits at the coarse resolutions (cheap)
        # and each PixelShuffle hop is followed by convs that refine edge
        # placement at the finer grid; a final full-resolution conv smooths
        # block seams.
        self.decoder = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, 4 * base, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(4 * base, 4 * base, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(4 * base, 4 * base, 3, padding=1),
            nn.GELU(),
            nn.PixelShuffle(2),
            nn.Conv2d(base, 2 * base, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * base, 2 * base, 3, padding=1),
            nn.GELU(),
            nn.PixelShuffle(2),
            nn.Conv2d(base // 2, 3 * base // 2, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(3 * base // 2, 3 * base // 2, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(3 * base // 2, 3 * base // 2, 1),
            nn.GELU(),
            nn.PixelShuffle(2),
            nn.Conv2d(3 * base // 8, 3, 3, padding=1),
        )

    def encode(self, frames: torch.Tensor) -> LatentClip:
        x = _as_channel_first(frames)
        h, w = x.shape[-2:]
        if h % 8 != 0 or w % 8 != 0:
            raise ValueError(f"frame size must be divisible by 8, got {h}x{w}")
        f1 = self.stage1(x)
        f2 = self.stage2(f1)
        z = self.stage3(f2)
        return LatentClip(
            latents=z.permute(0, 2, 3, 1).contiguous(),
            feat4x=f2.permute(0, 2, 3, 1).contiguous(),
        )

    def encode_latents(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encode(frames).latents

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 4 or latents.shape[-1] != LATENT_CHANNELS:
            raise ValueError(f"expected (T, h, w, {LATENT_CHANNELS}) latents, got {tuple(latents.shape)}")
        z = latents.permute(0, 3, 1, 2).contiguous()
        out = torch.sigmoid(self.decoder(z))
        return out.permute(0, 2, 3, 1).contiguous()

    def reconstruction_loss(self, frames: torch.Tensor) -> torch.Tensor:
        recon = self.decode(self.encode(frames).latents)
        return torch.mean((recon - frames) ** 2)


def psnr(reference: torch.Tensor, estimate: torch.Tensor) -> float:
    """PSNR in dB for signals in [0, 1], from the overall MSE."""
    mse = torch.mean((reference - estimate) ** 2).item()
    if mse == 0:
        return float("inf")
    return 10.0 * torch.log10(torch.tensor(1.0 / mse)).item()
