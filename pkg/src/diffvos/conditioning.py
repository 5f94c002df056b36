"""Prompt construction: text/visual token encoders and text-guided projection.

The conditioning prompt for frame t is

    p_ve_t = MLP(p_e + Softmax(p_e Wq (p_v_t Wk)^T / sqrt(C)) p_v_t Wv)

with the expression embedding p_e as the query and that frame's visual
tokens p_v_t as keys/values, so the prompt keeps the text length L while
absorbing frame content.  Three conditioning modes exist for ablations:

    IT  text-guided projection per frame (the formula above)
    T   broadcast p_e to every frame (text only)
    I   learnable per-token projection of visual tokens (image only,
        prompts have length N_p instead of L)

A concatenation baseline (text tokens ++ visual tokens through an MLP) is
kept parameter-matched with the attention path so the two fusions can be
compared like-for-like.

The toy text/vision encoders stand in for frozen CLIP towers: a learned
token embedding (or patch embedding) followed by two self-attention blocks.
Because both blocks attend globally, changing one word may shift every
output position -- the context window spans the whole sequence.  A second,
independently trained text encoder supplies the word vectors F_e consumed
by the mask decoding head.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources

import torch
from torch import nn

COND_CHANNELS = 64
PATCH_SIZE = 8


class VocabError(ValueError):
    """Raised when an expression contains a token outside the vocabulary."""


def load_vocab() -> dict[str, int]:
    data = json.loads(resources.files("diffvos").joinpath("vocab.json").read_text())
    return {tok: i for i, tok in enumerate(data["tokens"])}


@dataclass
class TextTokens:
    p_e: torch.Tensor  # (L, C) condition-path embedding
    f_e: torch.Tensor  # (L, C) mask-head word vectors
    token_ids: torch.Tensor  # (L,) int64


@dataclass
class ImageTokens:
    p_v: torch.Tensor  # (T, N_p, C)


@dataclass
class PromptTokens:
    p_ve: torch.Tensor  # (T, L', C); L' = L for IT/T, N_p for I, L+N_p for concat
    mode: str


class Tokenizer:
    def __init__(self, vocab: dict[str, int] | None = None):
        self.vocab = vocab or load_vocab()

    def __call__(self, expression: str) -> torch.Tensor:
        ids = []
        for tok in expression.strip().split():
            if tok not in self.vocab:
                raise VocabError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.vocab[tok])
        if not ids:
            raise VocabError("empty expression")
        return torch.tensor(ids, dtype=torch.long)


class SelfAttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(
            nn.Linear(channels, channels * 2),
            nn.GELU(),
            nn.Linear(channels * 2, channels),
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ffn(self.norm2(x))


class ToyTextEncoder(nn.Module):
    """Token embedding + learned positions + 2 self-attention blocks."""

    def __init__(self, vocab_size: int, channels: int = COND_CHANNELS, max_len: int = 12):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, channels)
        self.pos = nn.Parameter(torch.zeros(max_len, channels))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList([SelfAttentionBlock(channels) for _ in range(2)])

    def forward(self, token_ids: torch.Tensor, use_positions: bool = True) -> torch.Tensor:
        if token_ids.numel() > self.pos.shape[0]:
            raise ValueError(f"expression too long: {token_ids.numel()} > {self.pos.shape[0]}")
        x = self.embed(token_ids)
        if use_positions:
            x = x + self.pos[: token_ids.numel()]
        x = x.unsqueeze(0)
        for blk in self.blocks:
            x = blk(x)
        return x.squeeze(0)


def sine_positions_2d(h: int, w: int, channels: int, device=None, dtype=None) -> torch.Tensor:
    """(h*w, channels) fixed 2D sine/cosine positional table."""
    if channels % 4 != 0:
        raise ValueError("channels must be divisible by 4")
    quarter = channels // 4
    freq = torch.exp(
        -math.log(1e4) * torch.arange(quarter, device=device, dtype=dtype or torch.float32) / max(quarter, 1)
    )
    ys = torch.arange(h, device=device, dtype=dtype or torch.float32)
    xs = torch.arange(w, device=device, dtype=dtype or torch.float32)
    y = ys[:, None] * freq[None, :]
    x = xs[:, None] * freq[None, :]
    ey = torch.cat([torch.sin(y), torch.cos(y)], dim=1)  # (h, 2q)
    ex = torch.cat([torch.sin(x), torch.cos(x)], dim=1)  # (w, 2q)
    grid = torch.cat(
        [ey[:, None, :].expand(h, w, 2 * quarter), ex[None, :, :].expand(h, w, 2 * quarter)], dim=2
    )
    return grid.reshape(h * w, channels)


class ToyVisionTokenizer(nn.Module):
    """Patch embedding (rho=8) + 2D sine positions + 2 self-attention blocks."""

    def __init__(self, channels: int = COND_CHANNELS, patch: int = PATCH_SIZE):
        super().__init__()
        self.patch = patch
        self.embed = nn.Conv2d(3, channels, kernel_size=patch, stride=patch)
        self.blocks = nn.ModuleList([SelfAttentionBlock(channels) for _ in range(2)])

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"expected (T, H, W, 3) clip, got {tuple(frames.shape)}")
        h, w = frames.shape[1:3]
        if h % self.patch != 0 or w % self.patch != 0:
            raise ValueError(f"frame size must be divisible by {self.patch}, got {h}x{w}")
        x = self.embed(frames.permute(0, 3, 1, 2).contiguous())  # (T, C, h/p, w/p)
        t, c, gh, gw = x.shape
        x = x.flatten(2).transpose(1, 2)  # (T, N_p, C)
        x = x + sine_positions_2d(gh, gw, c, device=x.device, dtype=x.dtype)
        for blk in self.blocks:
            x = blk(x)
        return x


class ResidualMLP(nn.Module):
    """x + W2 gelu(W1 x); W2 zero-initialized so the block starts as identity."""

    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class TextGuidedProjection(nn.Module):
    """Eq.-style cross attention: text queries, per-frame visual keys/values."""

    def __init__(self, channels: int = COND_CHANNELS):
        super().__init__()
        self.channels = channels
        self.wq = nn.Linear(channels, channels, bias=False)
        self.wk = nn.Linear(channels, channels, bias=False)
        self.wv = nn.Linear(channels, channels, bias=False)
        self.mlp = ResidualMLP(channels, 4 * channels)

    def attention(self, p_e: torch.Tensor, p_v: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention (T, L, N_p) of text over visual tokens."""
        if p_e.shape[-1] != self.channels or p_v.shape[-1] != self.channels:
            raise ValueError(
                f"channel mismatch: text {p_e.shape[-1]}, image {p_v.shape[-1]}, expected {self.channels}"
            )
        q = self.wq(p_e)  # (L, C)
        k = self.wk(p_v)  # (T, N_p, C)
        scores = torch.einsum("lc,tnc->tln", q, k) / math.sqrt(self.channels)
        return torch.softmax(scores, dim=-1)

    def forward(self, p_e: torch.Tensor, p_v: torch.Tensor, return_attention: bool = False):
        attn = self.attention(p_e, p_v)  # (T, L, N_p)
        ctx = torch.einsum("tln,tnc->tlc", attn, self.wv(p_v))
        out = self.mlp(p_e.unsqueeze(0) + ctx)
        if return_attention:
            return out, attn
        return out


class ConcatFusion(nn.Module):
    """Length-wise concat of text and visual tokens through a matched MLP.

    Three bias-free projections (text, image, shared output) plus the same
    residual MLP as the attention path give exactly 11*C^2 + 5*C trainable
    parameters on both fusion routes.
    """

    def __init__(self, channels: int = COND_CHANNELS):
        super().__init__()
        self.channels = channels
        self.wt = nn.Linear(channels, channels, bias=False)
        self.wi = nn.Linear(channels, channels, bias=False)
        self.wo = nn.Linear(channels, channels, bias=False)
        self.mlp = ResidualMLP(channels, 4 * channels)

    def forward(self, p_e: torch.Tensor, p_v: torch.Tensor) -> torch.Tensor:
        if p_e.shape[-1] != self.channels or p_v.shape[-1] != self.channels:
            raise ValueError("channel mismatch in concat fusion")
        t = p_v.shape[0]
        text = self.wt(p_e).unsqueeze(0).expand(t, -1, -1)
        image = self.wi(p_v)
        tokens = torch.cat([text, image], dim=1)  # (T, L + N_p, C)
        return self.mlp(self.wo(tokens))


class PromptBuilder(nn.Module):
    modes = ("IT", "I", "T")

    def __init__(self, channels: int = COND_CHANNELS):
        super().__init__()
        self.projection = TextGuidedProjection(channels)
        self.concat = ConcatFusion(channels)
        self.image_proj = nn.Linear(channels, channels)

    def forward(self, text: TextTokens, images: ImageTokens, mode: str = "IT", fusion: str = "attention") -> PromptTokens:
        if mode not in self.modes:
            raise ValueError(f"unknown conditioning mode {mode!r}; expected one of {self.modes}")
        if fusion not in ("attention", "concat"):
            raise ValueError(f"unknown fusion {fusion!r}")
        t = images.p_v.shape[0]
        if mode == "T":
            p_ve = text.p_e.unsqueeze(0).expand(t, -1, -1)
        elif mode == "I":
            p_ve = self.image_proj(images.p_v)
        elif fusion == "concat":
            p_ve = self.concat(text.p_e, images.p_v)
        else:
            p_ve = self.projection(text.p_e, images.p_v)
        return PromptTokens(p_ve=p_ve, mode=mode)


class ConditionEncoder(nn.Module):
    """Bundles the tokenizer, both text encoders, the vision tokenizer and
    the prompt builder.  The encoders are pretrained with the generator and
    then frozen; the prompt builder trains with the segmentation head."""

    def __init__(self, channels: int = COND_CHANNELS):
        super().__init__()
        self.channels = channels
        self.tokenizer = Tokenizer()
        self.text_cond = ToyTextEncoder(len(self.tokenizer.vocab), channels)
        self.text_words = ToyTextEncoder(len(self.tokenizer.vocab), channels)
        self.vision = ToyVisionTokenizer(channels)
        self.prompts = PromptBuilder(channels)

    def encode_text(self, expression: str) -> TextTokens:
        ids = self.tokenizer(expression)
        return TextTokens(p_e=self.text_cond(ids), f_e=self.text_words(ids), token_ids=ids)

    def encode_frames(self, frames: torch.Tensor) -> ImageTokens:
        return ImageTokens(p_v=self.vision(frames))

    def build_prompt(self, text: TextTokens, images: ImageTokens, mode: str = "IT", fusion: str = "attention") -> PromptTokens:
        return self.prompts(text, images, mode=mode, fusion=fusion)
