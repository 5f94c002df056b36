from __future__ import annotations

import math

import pytest
import torch

from diffvos.conditioning import (
    ConcatFusion,
    ConditionEncoder,
    PromptBuilder,
    TextGuidedProjection,
    TextTokens,
    ImageTokens,
    Tokenizer,
    VocabError,
    load_vocab,
)
from diffvos.synth import COLORS, MOTIONS, SHAPES

from fdcheck import coordinate_fd_grad, max_rel_err


def test_tokenizer_contract():
    tok = Tokenizer()
    ids = tok("the red circle moving left")
    assert ids.shape == (5,)
    with pytest.raises(VocabError) as exc:
        tok("the crimson circle moving left")
    assert "crimson" in str(exc.value)
    with pytest.raises(VocabError):
        tok("   ")


def test_vocab_covers_grammar():
    vocab = load_vocab()
    words = {"the", "moving", "bouncing", "around"}
    words.update(COLORS)
    words.update(SHAPES)
    words.update(m for m in MOTIONS if m != "bounce")
    assert words <= set(vocab)


def test_encode_text_deterministic_and_sensitive():
    enc = ConditionEncoder()
    a = enc.encode_text("the red circle moving left")
    b = enc.encode_text("the red circle moving left")
    assert torch.equal(a.p_e, b.p_e) and torch.equal(a.f_e, b.f_e)
    # self-attention spans the whole sequence, so one word can move all rows
    c = enc.encode_text("the red circle moving right")
    assert not torch.equal(a.p_e, c.p_e)
    assert not torch.equal(a.f_e, c.f_e)
    # the two text encoders are independent towers
    assert not torch.equal(a.p_e, a.f_e)


def test_encode_frames_contract():
    enc = ConditionEncoder()
    frames = torch.rand(3, 64, 64, 3)
    frames[1] = frames[0]
    toks = enc.encode_frames(frames)
    assert toks.p_v.shape == (3, 64, enc.channels)
    assert torch.equal(toks.p_v[0], toks.p_v[1])
    brighter = torch.clamp(frames * 1.5, 0, 1)
    assert not torch.equal(enc.encode_frames(brighter).p_v[0], toks.p_v[0])
    with pytest.raises(ValueError):
        enc.encode_frames(torch.rand(2, 60, 64, 3))


def test_projection_zero_value_path_returns_text():
    proj = TextGuidedProjection(16)
    with torch.no_grad():
        proj.wv.weight.zero_()
    p_e = torch.randn(4, 16)
    out_a = proj(p_e, torch.randn(3, 7, 16))
    out_b = proj(p_e, torch.randn(3, 7, 16))
    # W^V = 0 and the identity-initialized MLP leave the text untouched
    for t in range(3):
        assert torch.equal(out_a[t], p_e)
        assert torch.equal(out_b[t], p_e)


def test_attention_rows_sum_to_one():
    proj = TextGuidedProjection(32)
    torch.manual_seed(0)
    for _ in range(100):
        attn = proj.attention(torch.randn(3, 32), torch.randn(2, 5, 32))
        sums = attn.sum(dim=-1)
        assert (sums - 1.0).abs().max().item() <= 1e-6


def test_projection_matches_hand_computed_attention():
    """L=2, N_p=3, C=2 against a scalar hand computation."""
    proj = TextGuidedProjection(2).double()
    wq = [[0.5, -0.25], [1.0, 0.75]]  # right-multiplication matrices
    wk = [[0.2, 0.4], [-0.6, 0.3]]
    wv = [[1.5, -0.5], [0.25, 1.0]]
    with torch.no_grad():
        proj.wq.weight.copy_(torch.tensor(wq, dtype=torch.float64).T)
        proj.wk.weight.copy_(torch.tensor(wk, dtype=torch.float64).T)
        proj.wv.weight.copy_(torch.tensor(wv, dtype=torch.float64).T)
    p_e = [[0.3, -0.7], [1.1, 0.2]]
    p_v = [[0.5, 0.9], [-0.4, 0.1], [0.8, -0.6]]

    def matvec(m, v):
        return [sum(v[k] * m[k][j] for k in range(2)) for j in range(2)]

    q = [matvec(wq, row) for row in p_e]
    k = [matvec(wk, row) for row in p_v]
    v = [matvec(wv, row) for row in p_v]
    scale = 1.0 / math.sqrt(2.0)
    attn_hand = []
    out_hand = []
    for l in range(2):
        scores = [scale * (q[l][0] * k[n][0] + q[l][1] * k[n][1]) for n in range(3)]
        m = max(scores)
        exps = [math.exp(s - m) for s in scores]
        z = sum(exps)
        weights = [e / z for e in exps]
        attn_hand.append(weights)
        ctx = [sum(weights[n] * v[n][j] for n in range(3)) for j in range(2)]
        out_hand.append([p_e[l][j] + ctx[j] for j in range(2)])

    out, attn = proj(
        torch.tensor(p_e, dtype=torch.float64),
        torch.tensor(p_v, dtype=torch.float64).unsqueeze(0),
        return_attention=True,
    )
    assert (attn[0] - torch.tensor(attn_hand, dtype=torch.float64)).abs().max() <= 1e-6
    assert (out[0] - torch.tensor(out_hand, dtype=torch.float64)).abs().max() <= 1e-6


def test_projection_rejects_channel_mismatch():
    proj = TextGuidedProjection(8)
    with pytest.raises(ValueError):
        proj(torch.randn(2, 8), torch.randn(1, 3, 4))


def test_projection_gradients_match_finite_differences():
    torch.manual_seed(3)
    proj = TextGuidedProjection(4).double()
    p_e = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    p_v = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    weight = torch.randn(1, 2, 4, dtype=torch.float64)

    def loss():
        return (proj(p_e, p_v) * weight).sum()

    value = loss()
    value.backward()
    for tensor in [p_e, p_v, *proj.parameters()]:
        fd = coordinate_fd_grad(loss, tensor.data if tensor.is_leaf else tensor)
        assert max_rel_err(tensor.grad, fd) <= 1e-4


def test_build_prompt_modes():
    enc = ConditionEncoder()
    text = enc.encode_text("the blue square moving up")
    frames = torch.rand(4, 64, 64, 3)
    static = frames[0].expand(4, -1, -1, -1)
    images = enc.encode_frames(frames)
    static_images = enc.encode_frames(static)

    t_mode = enc.build_prompt(text, images, mode="T")
    for t in range(1, 4):
        assert torch.equal(t_mode.p_ve[t], t_mode.p_ve[0])

    it_static = enc.build_prompt(text, static_images, mode="IT")
    for t in range(1, 4):
        assert torch.equal(it_static.p_ve[t], it_static.p_ve[0])

    it_mode = enc.build_prompt(text, images, mode="IT")
    i_mode = enc.build_prompt(text, images, mode="I")
    assert it_mode.p_ve.shape == (4, 5, enc.channels)
    assert i_mode.p_ve.shape == (4, 64, enc.channels)

    with pytest.raises(ValueError):
        enc.build_prompt(text, images, mode="TI")
    with pytest.raises(ValueError):
        enc.build_prompt(text, images, mode="IT", fusion="sum")


def test_concat_fusion_length_and_parameter_audit():
    channels = 64
    proj = TextGuidedProjection(channels)
    fusion = ConcatFusion(channels)
    n_proj = sum(p.numel() for p in proj.parameters())
    n_fusion = sum(p.numel() for p in fusion.parameters())
    assert n_proj == n_fusion == 11 * channels**2 + 5 * channels

    out = fusion(torch.randn(5, channels), torch.randn(2, 9, channels))
    assert out.shape == (2, 14, channels)


def test_prompt_builder_channel_guard():
    builder = PromptBuilder(16)
    text = TextTokens(p_e=torch.randn(3, 8), f_e=torch.randn(3, 8), token_ids=torch.arange(3))
    images = ImageTokens(p_v=torch.randn(2, 4, 16))
    with pytest.raises(ValueError):
        builder(text, images, mode="IT")
