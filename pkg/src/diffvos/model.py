"""Full model assembly: frozen generative backbone + trainable referring parts.

The backbone (frame codec, conditioning text/vision towers, denoising U-Net)
is pretrained by `train.pretrain_codec` / `train.pretrain_generator` and then
frozen; referring-segmentation training only updates the prompt builder, the
word-feature tower, the noise predictor and the mask head.  `param_checksum`
provides the digest used to police that freeze.
"""

from __future__ import annotations

import hashlib
from contextlib import nullcontext
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .codec import FrameCodec
from .conditioning import ConditionEncoder, ImageTokens, TextTokens
from .head import HeadConfig, MaskHead, Predictions
from .noise import NoisePredictor, ScheduleConfig, blend, gaussian_noise_baseline
from .unet import UNetConfig, VideoUNet, assemble_pyramid

NOISE_MODES = ("predicted", "gaussian")

# Submodule names frozen at referring-training time.  The codec and U-Net
# checksums are the hard contract; the conditioning towers are frozen with
# them because they were pretrained as part of the same generative stack.
FROZEN_PARTS = ("codec", "unet", "text_cond", "vision")
TRAINABLE_PARTS = ("prompts", "text_words", "noise", "head")


def param_checksum(module: nn.Module) -> str:
    """sha256 over the module's state dict, iterated in sorted-name order."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name]
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _grad_context(module: nn.Module):
    """no_grad when every parameter is frozen, else a no-op context."""
    if any(p.requires_grad for p in module.parameters()):
        return nullcontext()
    return torch.no_grad()


@dataclass
class FrozenFeatures:
    """Outputs of the frozen stages for one clip.

    Training revisits each clip many times; these never change once the
    backbone is frozen, so they are computed once and cached.
    """

    token_ids: torch.Tensor
    p_e: torch.Tensor
    p_v: torch.Tensor
    latents: torch.Tensor
    feat4x: torch.Tensor


class RvosModel(nn.Module):
    def __init__(self, unet_cfg: UNetConfig | None = None, head_cfg: HeadConfig | None = None):
        super().__init__()
        self.codec = FrameCodec()
        self.cond = ConditionEncoder()
        self.noise = NoisePredictor()
        self.unet = VideoUNet(unet_cfg)
        self.head = MaskHead(head_cfg)

    # note: named_parts uses attribute paths so checksum reports stay stable
    def named_parts(self) -> dict[str, nn.Module]:
        return {
            "codec": self.codec,
            "unet": self.unet,
            "text_cond": self.cond.text_cond,
            "vision": self.cond.vision,
            "prompts": self.cond.prompts,
            "text_words": self.cond.text_words,
            "noise": self.noise,
            "head": self.head,
        }

    def freeze_backbone(self) -> None:
        parts = self.named_parts()
        for name in FROZEN_PARTS:
            parts[name].requires_grad_(False)
            parts[name].eval()
        for name in TRAINABLE_PARTS:
            parts[name].requires_grad_(True)

    def trainable_parameters(self):
        parts = self.named_parts()
        for name in TRAINABLE_PARTS:
            yield from (p for p in parts[name].parameters() if p.requires_grad)

    # -- feature extraction --------------------------------------------------

    def precompute(self, frames: torch.Tensor, expression: str) -> FrozenFeatures:
        """Run the frozen stages once for a clip (cacheable across steps)."""
        token_ids = self.cond.tokenizer(expression)
        with _grad_context(self.codec):
            clip = self.codec.encode(frames)
        with _grad_context(self.cond.vision):
            p_v = self.cond.vision(frames)
        with _grad_context(self.cond.text_cond):
            p_e = self.cond.text_cond(token_ids)
        return FrozenFeatures(
            token_ids=token_ids,
            p_e=p_e,
            p_v=p_v,
            latents=clip.latents,
            feat4x=clip.feat4x,
        )

    def extract(
        self,
        frames: torch.Tensor | None,
        expression: str | None = None,
        *,
        mode: str = "IT",
        fusion: str = "attention",
        noise_mode: str = "predicted",
        schedule: ScheduleConfig | None = None,
        noise_seed: int = 0,
        frozen: FrozenFeatures | None = None,
    ):
        """Run the diffusion feature path; returns (pyramid, word_features).

        Frozen stages run under no_grad (or come precomputed via `frozen`);
        gradients still flow from the loss through the frozen U-Net into the
        prompt builder and the noise predictor, which is exactly the training
        contract.
        """
        if noise_mode not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {noise_mode!r}; expected one of {NOISE_MODES}")
        schedule = schedule or ScheduleConfig()
        if frozen is None:
            if frames is None or expression is None:
                raise ValueError("either frames+expression or a FrozenFeatures bundle is required")
            frozen = self.precompute(frames, expression)

        f_e = self.cond.text_words(frozen.token_ids)
        text = TextTokens(p_e=frozen.p_e, f_e=f_e, token_ids=frozen.token_ids)
        prompts = self.cond.build_prompt(text, ImageTokens(p_v=frozen.p_v), mode=mode, fusion=fusion)

        latents = frozen.latents
        if noise_mode == "predicted":
            noise_field = self.noise(latents)
        else:
            noise_field = gaussian_noise_baseline(latents.shape, seed=noise_seed).to(latents.dtype)
        noisy = blend(latents, noise_field, schedule)

        # The U-Net runs in grad mode even when frozen: its own parameters
        # receive no gradient, but the graph must flow through it into the
        # prompt builder and the noise predictor.
        side_outputs = self.unet.extract_features(noisy, prompts.p_ve, step=schedule.step)
        pyramid = assemble_pyramid(list(side_outputs), frozen.feat4x)
        return pyramid, f_e

    def forward(
        self,
        frames: torch.Tensor | None,
        expression: str | None = None,
        *,
        mode: str = "IT",
        fusion: str = "attention",
        noise_mode: str = "predicted",
        schedule: ScheduleConfig | None = None,
        noise_seed: int = 0,
        frozen: FrozenFeatures | None = None,
    ) -> Predictions:
        pyramid, f_e = self.extract(
            frames,
            expression,
            mode=mode,
            fusion=fusion,
            noise_mode=noise_mode,
            schedule=schedule,
            noise_seed=noise_seed,
            frozen=frozen,
        )
        return self.head(pyramid, f_e)


def frozen_checksums(model: RvosModel) -> dict[str, str]:
    parts = model.named_parts()
    return {name: param_checksum(parts[name]) for name in FROZEN_PARTS}


def save_checkpoint(path, model: RvosModel, extra: dict | None = None) -> None:
    payload = {
        "format_version": 1,
        "unet_cfg": asdict(model.unet.cfg),
        "head_cfg": asdict(model.head.cfg),
        "state": model.state_dict(),
        "frozen_checksums": frozen_checksums(model),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[RvosModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format_version')!r}")
    unet_cfg = UNetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload["unet_cfg"].items()})
    head_cfg = HeadConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload["head_cfg"].items()})
    model = RvosModel(unet_cfg, head_cfg)
    model.load_state_dict(payload["state"])
    stored = payload["frozen_checksums"]
    current = frozen_checksums(model)
    if stored != current:
        raise ValueError("checkpoint frozen-part checksums do not match the restored weights")
    return model, payload["extra"]
