"""Video-specific noise prediction and the step-0 forward blend.

The predictor runs latents through one 3x3 conv (4->4, zero-init bias), a
trainable 4x4 channel mix W_N, then normalizes per frame over all
spatial-channel elements:

    n_t = (f_t W_N - mean(f_t W_N)) / (std(f_t W_N) + 1e-5)

so each frame of the noise field is ~zero-mean / unit-std, with the 1e-5
regularizer absorbing degenerate constant frames (those map to the zero
field instead of dividing by zero).

Blending follows a noise schedule with two conventions for how much of the
original latent survives at step s:

    literal:  out = alpha_s * F_o + (1 - alpha_s) * N,  alpha_s = 1 - beta_s
    sqrt:     out = sqrt(abar_s) * F_o + sqrt(1 - abar_s) * N,
              abar_s = prod_{u<=s} (1 - beta_u)

Both use a 1000-step linear beta ramp in [8.5e-4, 1.2e-2]; `literal` with
step 0 is the default, and either way alpha decreases with the step index
(more noise at higher steps).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

EPSILON = 1e-5
DEFAULT_STEPS = 1000
BETA_START = 8.5e-4
BETA_END = 1.2e-2


@dataclass
class ScheduleConfig:
    step: int = 0
    convention: str = "literal"
    num_steps: int = DEFAULT_STEPS
    beta_start: float = BETA_START
    beta_end: float = BETA_END
    betas: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        if self.convention not in ("literal", "sqrt"):
            raise ValueError(f"unknown schedule convention {self.convention!r}")
        self.betas = torch.linspace(self.beta_start, self.beta_end, self.num_steps, dtype=torch.float64)
        if not (0 <= self.step < self.num_steps):
            raise ValueError(f"step {self.step} outside schedule range [0, {self.num_steps})")

    def alpha(self, step: int | None = None) -> float:
        """Signal fraction at `step` under the configured convention."""
        s = self.step if step is None else step
        if not (0 <= s < self.num_steps):
            raise ValueError(f"step {s} outside schedule range [0, {self.num_steps})")
        if self.convention == "literal":
            return float(1.0 - self.betas[s])
        return float(torch.sqrt(torch.prod(1.0 - self.betas[: s + 1])))

    def noise_scale(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        if self.convention == "literal":
            return 1.0 - self.alpha(s)
        abar = float(torch.prod(1.0 - self.betas[: s + 1]))
        return float(torch.sqrt(torch.tensor(1.0 - abar)))

    def alpha_bar(self, step: int) -> float:
        if not (0 <= step < self.num_steps):
            raise ValueError(f"step {step} outside schedule range [0, {self.num_steps})")
        return float(torch.prod(1.0 - self.betas[: step + 1]))


class NoisePredictor(nn.Module):
    def __init__(self, channels: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.conv.bias)
        self.mix = nn.Parameter(torch.eye(channels))  # W_N

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim != 4 or latents.shape[-1] != self.mix.shape[0]:
            raise ValueError(f"expected (T, h, w, {self.mix.shape[0]}) latents, got {tuple(latents.shape)}")
        f = self.conv(latents.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        f = torch.einsum("thwc,cd->thwd", f, self.mix)
        flat = f.reshape(f.shape[0], -1)
        mu = flat.mean(dim=1)
        sigma = flat.std(dim=1, unbiased=False)
        centered = f - mu.view(-1, 1, 1, 1)
        return centered / (sigma.view(-1, 1, 1, 1) + EPSILON)


def gaussian_noise_baseline(shape, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=gen)


def blend_alpha(latents: torch.Tensor, noise: torch.Tensor, signal: float, noise_scale: float) -> torch.Tensor:
    if latents.shape != noise.shape:
        raise ValueError(f"shape mismatch: latents {tuple(latents.shape)} vs noise {tuple(noise.shape)}")
    return signal * latents + noise_scale * noise


def blend(latents: torch.Tensor, noise: torch.Tensor, schedule: ScheduleConfig) -> torch.Tensor:
    return blend_alpha(latents, noise, schedule.alpha(), schedule.noise_scale())
