"""Acceptance checks, one test per release criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line (collected again in the
terminal summary via conftest) so a tee'd ``pytest -v`` run doubles as the
acceptance report.  The checks deliberately re-derive their oracles inline
rather than importing them from the unit-test modules, so this file stands
alone as the contract.
"""

from __future__ import annotations

import dataclasses
import functools
import math
import time

import numpy as np
import torch

import conftest
from diffvos import config as config_mod
from diffvos.conditioning import ConditionEncoder, TextGuidedProjection
from diffvos.head import HeadConfig, MaskHead
from diffvos.losses import (
    GroundTruthInstances,
    LossWeights,
    brute_force_match,
    dice_loss,
    focal_loss,
    giou,
    hungarian_match,
    match_and_loss,
    total_loss,
)
from diffvos.metrics import (
    average_precision,
    contour_accuracy,
    evaluate_video,
    map_suite,
    match_radius,
    region_similarity,
)
from diffvos.noise import EPSILON, NoisePredictor, ScheduleConfig, blend, blend_alpha
from diffvos.unet import FeaturePyramid

from fdcheck import coordinate_fd_grad, directional_fd, max_rel_err


def criterion(name: str):
    """Record one pass/fail line for the wrapped acceptance test."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as err:
                _record(name, False, f"{type(err).__name__}: {err}")
                raise
            _record(name, True, detail or "")

        return run

    return wrap


def _record(name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" — {detail}" if detail else "")
    conftest.ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def _rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)


# -- conditioning ------------------------------------------------------------------


@criterion("text-guided projection matches hand-computed attention; rows sum to one")
def test_projection_oracle_and_row_sums():
    t0 = time.perf_counter()
    proj = TextGuidedProjection(2).double()
    wq = [[0.5, -0.25], [1.0, 0.75]]
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
    out_hand = []
    for l in range(2):
        scores = [scale * (q[l][0] * k[n][0] + q[l][1] * k[n][1]) for n in range(3)]
        m = max(scores)
        exps = [math.exp(s - m) for s in scores]
        z = sum(exps)
        weights = [e / z for e in exps]
        ctx = [sum(weights[n] * v[n][j] for n in range(3)) for j in range(2)]
        out_hand.append([p_e[l][j] + ctx[j] for j in range(2)])
    out = proj(torch.tensor(p_e, dtype=torch.float64), torch.tensor(p_v, dtype=torch.float64).unsqueeze(0))
    hand_dev = (out[0] - torch.tensor(out_hand, dtype=torch.float64)).abs().max().item()
    assert hand_dev <= 1e-6

    full = TextGuidedProjection(32)
    torch.manual_seed(0)
    row_dev = 0.0
    for _ in range(100):
        attn = full.attention(torch.randn(3, 32), torch.randn(2, 5, 32))
        row_dev = max(row_dev, (attn.sum(dim=-1) - 1.0).abs().max().item())
    assert row_dev <= 1e-6
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"took {elapsed:.2f}s (budget 1s)"
    return f"hand dev {hand_dev:.1e}, worst row-sum dev {row_dev:.1e}, {elapsed:.2f}s"


# -- noise-field normalization -----------------------------------------------------


def _identity_noise_predictor() -> NoisePredictor:
    pred = NoisePredictor().double()
    with torch.no_grad():
        pred.conv.weight.zero_()
        for c in range(4):
            pred.conv.weight[c, c, 1, 1] = 1.0
        pred.conv.bias.zero_()
        pred.mix.copy_(torch.eye(4, dtype=torch.float64))
    return pred


@criterion("noise-field normalization: constant input zeroes, mean/std closed forms")
def test_normalization_closed_forms():
    t0 = time.perf_counter()
    pred = _identity_noise_predictor()
    for value in (0.5, -2.0, 1.25):  # dyadic, so the frame mean is exact
        out = pred(torch.full((2, 3, 3, 4), value, dtype=torch.float64))
        assert torch.all(out == 0), "constant frame must map to the zero field"

    torch.manual_seed(0)
    mean_dev = std_dev = 0.0
    for _ in range(100):
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64) * torch.rand(1).double().clamp(min=0.05)
        out = pred(x)
        for t in range(x.shape[0]):
            flat = out[t].reshape(-1)
            sigma = x[t].reshape(-1).std(unbiased=False)
            mean_dev = max(mean_dev, flat.mean().abs().item())
            expected = (sigma / (sigma + EPSILON)).item()
            std_dev = max(std_dev, abs(flat.std(unbiased=False).item() - expected))
    assert mean_dev <= 1e-6 and std_dev <= 1e-6
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0, f"took {elapsed:.2f}s (budget 1s)"
    return f"mean dev {mean_dev:.1e}, std dev {std_dev:.1e}, {elapsed:.2f}s"


# -- noising blend -----------------------------------------------------------------


@criterion("noising blend: exact limits at full signal/noise, superposition linearity")
def test_blend_limits_and_linearity():
    torch.manual_seed(2)
    x = torch.randn(2, 4, 4, 4)
    n = torch.randn(2, 4, 4, 4)
    assert torch.equal(blend_alpha(x, n, 1.0, 0.0), x), "full-signal limit must be bit-exact"
    assert torch.equal(blend_alpha(x, n, 0.0, 1.0), n), "full-noise limit must be bit-exact"
    x2, n2 = torch.randn_like(x), torch.randn_like(n)
    a, b = 0.63, 0.37
    lin_dev = (blend_alpha(x + x2, n + n2, a, b) - blend_alpha(x, n, a, b) - blend_alpha(x2, n2, a, b)).abs().max().item()
    assert lin_dev <= 1e-6
    return f"limits bit-exact, linearity dev {lin_dev:.1e}"


# -- gradient suite ----------------------------------------------------------------


def _directional_check(fn, tensors) -> float:
    """Worst relative error between autograd and a central difference along a
    random direction in each tensor (gradients must already be populated)."""
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for t in tensors:
        assert t.grad is not None and torch.isfinite(t.grad).all()
        d = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        d = d / d.norm().clamp(min=1e-12)
        analytic = float((t.grad * d).sum())
        numeric = directional_fd(fn, [t.data], [d])
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


@criterion("gradients match finite differences: condition encoder, noise path, full loss")
def test_gradient_suite():
    t0 = time.perf_counter()
    # condition encoder, both towers and the prompt builder
    torch.manual_seed(4)
    enc = ConditionEncoder().double()
    frames = torch.rand(2, 16, 16, 3, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(2, 5, enc.channels, dtype=torch.float64)

    def enc_loss():
        prompts = enc.build_prompt(enc.encode_text("the blue square moving up"), enc.encode_frames(frames), mode="IT")
        return (prompts.p_ve * probe).sum()

    enc_loss().backward()
    used = [frames] + [p for p in enc.parameters() if p.grad is not None]
    worst_enc = _directional_check(enc_loss, used)
    assert worst_enc <= 1e-4, f"condition encoder rel err {worst_enc:.2e}"

    # noise prediction composed with the blend, every coordinate
    torch.manual_seed(3)
    pred = NoisePredictor().double()
    latents = torch.randn(2, 3, 3, 4, dtype=torch.float64, requires_grad=True)
    sched = ScheduleConfig(step=0)
    weight = torch.randn(2, 3, 3, 4, dtype=torch.float64)

    def noise_loss():
        return (blend(latents, pred(latents), sched) * weight).sum()

    noise_loss().backward()
    worst_noise = 0.0
    for tensor in (latents, pred.mix, pred.conv.weight, pred.conv.bias):
        fd = coordinate_fd_grad(noise_loss, tensor.data)
        worst_noise = max(worst_noise, max_rel_err(tensor.grad, fd))
    assert worst_noise <= 1e-4, f"noise path rel err {worst_noise:.2e}"

    # matched loss through the mask head on a T=2, Q=2, 16x16 configuration
    torch.manual_seed(6)
    head = MaskHead(HeadConfig(num_queries=2)).double().eval()
    gen = torch.Generator().manual_seed(1)
    levels = {
        4: torch.randn(2, 4, 4, 32, generator=gen, dtype=torch.float64, requires_grad=True),
        8: torch.randn(2, 2, 2, 32, generator=gen, dtype=torch.float64, requires_grad=True),
        16: torch.randn(2, 1, 1, 64, generator=gen, dtype=torch.float64, requires_grad=True),
        32: torch.randn(2, 1, 1, 96, generator=gen, dtype=torch.float64, requires_grad=True),
    }
    f_e = torch.randn(3, 64, generator=gen, dtype=torch.float64, requires_grad=True)
    masks = (torch.rand(1, 2, 16, 16, generator=gen) > 0.6).double()
    masks[:, :, 4:8, 4:8] = 1.0
    gt = GroundTruthInstances(
        masks=masks,
        boxes=torch.rand(1, 2, 4, generator=gen).double() * 0.4 + 0.3,
        valid=torch.ones(1, 2, dtype=torch.bool),
    )
    weights = LossWeights()
    first = match_and_loss(head(FeaturePyramid(levels=levels), f_e), gt, weights)
    assignment = first.assignment

    def loss_fn():
        pred = head(FeaturePyramid(levels=levels), f_e)
        return total_loss(pred, gt, assignment, weights).total

    loss_fn().backward()
    head_params = [p for _, p in head.named_parameters()]
    assert all(p.grad is not None and torch.isfinite(p.grad).all() for p in head_params)
    worst_loss = _directional_check(loss_fn, head_params + [f_e] + list(levels.values()))
    assert worst_loss <= 1e-4, f"loss rel err {worst_loss:.2e}"

    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"took {elapsed:.0f}s (budget 2min)"
    return (
        f"rel err encoder {worst_enc:.1e}, noise {worst_noise:.1e}, "
        f"loss {worst_loss:.1e} over {len(head_params) + 5} tensors, {elapsed:.0f}s"
    )


# -- assignment --------------------------------------------------------------------


@criterion("assignment cost equals brute-force enumeration on 500 random matrices")
def test_assignment_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    for trial in range(500):
        q = int(rng.integers(1, 6))
        g = int(rng.integers(1, 6))
        cost = torch.tensor(rng.integers(0, 640, size=(q, g)) / 64.0)  # dyadic: sums exact
        fast = hungarian_match(cost)
        slow = brute_force_match(cost)
        assert fast.cost == slow.cost, f"trial {trial}: {fast.cost} != {slow.cost}"
        assert len(fast.pairs) == min(q, g)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"took {elapsed:.1f}s (budget 30s)"
    return f"500/500 exact at sizes up to 5x5, {elapsed:.1f}s"


# -- metric oracles ----------------------------------------------------------------


def _brute_force_contour_f(pred, gt):
    def boundary(mask):
        pts = []
        h, w = mask.shape
        for y in range(h):
            for x in range(w):
                if not mask[y, x]:
                    continue
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ny, nx = y + dy, x + dx
                    if ny < 0 or nx < 0 or ny >= h or nx >= w or not mask[ny, nx]:
                        pts.append((y, x))
                        break
        return pts

    pb, gb = boundary(pred), boundary(gt)
    if not pb and not gb:
        return 1.0
    if not pb or not gb:
        return 0.0
    r2 = match_radius(*pred.shape) ** 2
    matched_p = sum(1 for (y, x) in pb if any((y - gy) ** 2 + (x - gx) ** 2 <= r2 for gy, gx in gb))
    matched_g = sum(1 for (gy, gx) in gb if any((y - gy) ** 2 + (x - gx) ** 2 <= r2 for y, x in pb))
    precision, recall = matched_p / len(pb), matched_g / len(gb)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _strip(start, stop, length=100):
    m = np.zeros((1, length), dtype=bool)
    m[0, start:stop] = True
    return m


@criterion("metric oracles: dice/focal/giou hand cases, boundary-F, mAP grid, J&F identity")
def test_metric_oracles():
    # dice against a scalar recomputation
    torch.manual_seed(0)
    logits = torch.randn(4, 4, dtype=torch.float64)
    gt = (torch.rand(4, 4) > 0.5).double()
    inter = p_sum = g_sum = 0.0
    for i in range(4):
        for j in range(4):
            p = 1.0 / (1.0 + math.exp(-logits[i, j].item()))
            inter += p * gt[i, j].item()
            p_sum += p
            g_sum += gt[i, j].item()
    dice_expect = 1.0 - (2.0 * inter + 1.0) / (p_sum + g_sum + 1.0)
    assert abs(dice_loss(logits, gt).item() - dice_expect) <= 1e-7

    # focal hand case: logits [2, -1], targets [1, 0], alpha .25, gamma 2
    p1 = 1.0 / (1.0 + math.exp(-2.0))
    p2 = 1.0 / (1.0 + math.exp(1.0))
    focal_expect = (-0.25 * (1 - p1) ** 2 * math.log(p1) - 0.75 * p2**2 * math.log(1 - p2)) / 2.0
    got = focal_loss(torch.tensor([2.0, -1.0], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert abs(got.item() - focal_expect) <= 1e-7

    # giou hand geometry: identical box, edge-sharing unit squares
    a = torch.tensor([0.5, 0.5, 0.2, 0.2])
    assert abs(giou(a, a).item() - 1.0) <= 1e-7
    left = torch.tensor([0.25, 0.5, 0.5, 1.0])
    right = torch.tensor([0.75, 0.5, 0.5, 1.0])
    assert abs(giou(left, right).item()) <= 1e-7

    # boundary F-measure against the quadratic-time matcher
    rng = np.random.default_rng(0)
    contour_dev = 0.0
    for _ in range(100):
        h, w = int(rng.integers(6, 20)), int(rng.integers(6, 20))
        pred = rng.random((h, w)) > 0.6
        gt_mask = rng.random((h, w)) > 0.6
        contour_dev = max(contour_dev, abs(contour_accuracy(pred, gt_mask) - _brute_force_contour_f(pred, gt_mask)))
    assert contour_dev <= 1e-9

    # mAP: 10-threshold grid and the six-strip PR hand case
    gts = [_strip(0, 25), _strip(0, 20), _strip(0, 10), _strip(0, 20), _strip(0, 10), _strip(0, 10)]
    preds = [_strip(1, 25), _strip(3, 20), _strip(3, 10), _strip(9, 20), _strip(7, 10), _strip(50, 60)]
    scores = [0.9, 0.8, 0.85, 0.6, 0.95, 0.5]
    ious = [region_similarity(p, g) for p, g in zip(preds, gts)]
    assert ious == [0.96, 0.85, 0.7, 0.55, 0.3, 0.0]
    assert abs(average_precision(np.array(ious), np.array(scores), 0.50) - 8.0 / 15.0) <= 1e-12
    assert abs(average_precision(np.array(ious), np.array(scores), 0.75) - 1.0 / 6.0) <= 1e-12
    _, _, _, aps = map_suite(preds, scores, gts)
    assert len(aps) == 10

    # J&F is exactly the J/F mean
    rng = np.random.default_rng(1)
    jf_dev = 0.0
    for _ in range(20):
        record = evaluate_video(rng.random((4, 16, 16)) > 0.5, rng.random((4, 16, 16)) > 0.5)
        jf_dev = max(jf_dev, abs(record.jf - (record.j + record.f) / 2.0))
    assert jf_dev <= 1e-12
    return f"boundary-F dev {contour_dev:.1e}, J&F identity dev {jf_dev:.1e}, AP grid 10 thresholds"


# -- end-to-end contracts ----------------------------------------------------------


@criterion("frozen backbone: codec and U-Net weights bit-identical after referring training")
def test_frozen_backbone_after_training(desk_run):
    pre_codec = torch.load(desk_run.run / "codec.pt", weights_only=True)["codec"]
    pre_unet = torch.load(desk_run.run / "generator.pt", weights_only=True)["unet"]
    post_codec = desk_run.model.codec.state_dict()
    post_unet = desk_run.model.unet.state_dict()
    assert pre_codec.keys() == post_codec.keys() and pre_unet.keys() == post_unet.keys()
    for key in pre_codec:
        assert torch.equal(pre_codec[key], post_codec[key]), f"codec.{key} changed"
    for key in pre_unet:
        assert torch.equal(pre_unet[key], post_unet[key]), f"unet.{key} changed"
    return (
        f"{len(pre_codec)} codec and {len(pre_unet)} U-Net tensors unchanged "
        f"after {desk_run.cfg.train.steps} training steps"
    )


@criterion("default preset reaches J&F >= 70 on held-out videos within 30 minutes")
def test_default_run_quality_and_budget(desk_run):
    jf = desk_run.result.summary["jf"]
    videos = len(desk_run.result.rows)
    minutes = desk_run.seconds / 60.0
    assert videos == desk_run.cfg.data.num_eval == 50
    assert jf >= 70.0, f"J&F {jf:.2f} < 70 on {videos} held-out videos"
    assert minutes < 30.0, f"pipeline took {minutes:.1f} min (budget 30)"
    return f"J&F {jf:.2f} on {videos} held-out videos, full pipeline {minutes:.1f} min"


@criterion("ablation grids: conditioning rows, matched-parameter fusion, step-sweep shape")
def test_ablation_structure_and_step_sweep(quick_ablate):
    tables = quick_ablate.tables
    assert list(tables["components"]) == ["I", "T", "IT", "IT+NP"]
    assert set(tables["fusion"]) == {("I", "-"), ("T", "-"), ("IT", "attention"), ("IT", "concat")}
    params = tables["fusion_params"]
    assert params["attention"] == params["concat"], f"unequal trainable counts: {params}"

    steps = sorted(tables["steps"])
    assert steps == [1, 5, 10, 50, 100]
    jfs = [tables["steps"][s][0] for s in steps]
    inversions = [
        (steps[i], steps[i + 1], jfs[i + 1] - jfs[i])
        for i in range(len(jfs) - 1)
        if jfs[i + 1] > jfs[i]
    ]
    assert len(inversions) <= 1, f"step sweep rose more than once: {inversions}"
    assert all(gap <= 0.5 for _, _, gap in inversions), f"inversion above 0.5 J&F: {inversions}"
    sweep = ", ".join(f"{s}:{jf:.2f}" for s, jf in zip(steps, jfs))
    return f"4 conditioning rows, fusion arms at {params['attention']} params each, sweep {sweep}"


@criterion("joint image+text conditioning at least as temporally stable as image-only")
def test_temporal_stability_direction(quick_ablate):
    it = quick_ablate.tables["temporal"]["IT"]
    img = quick_ablate.tables["temporal"]["I"]
    assert len(it) >= 3 and len(img) >= 3
    mean_it, mean_i = float(np.mean(it)), float(np.mean(img))
    assert mean_it <= mean_i, f"iou_diff(1): IT {mean_it:.3f} > I {mean_i:.3f}"
    return f"mean iou_diff(1) over {len(it)} seeds: IT {mean_it:.3f} vs I {mean_i:.3f}"


@criterion("identical seed and config reproduce metric CSVs byte-for-byte")
def test_rerun_reproducibility(tmp_path):
    from diffvos import cli

    cfg = config_mod.preset("quick")
    cfg = dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, num_train=6, num_eval=3, num_frames=4, height=32, width=32),
        pretrain=dataclasses.replace(cfg.pretrain, codec_steps=12, generator_steps=8, val_videos=2),
        train=dataclasses.replace(cfg.train, steps=12, snapshot_videos=2),
    )
    outputs = []
    for attempt in ("first", "second"):
        run = cli.prepare_run_dir(tmp_path / attempt, "train", cfg)
        cli.run_train(cfg, run)
        outputs.append(run)
    compared = []
    for name in ("metrics.csv", "metrics_summary.csv", "loss.csv", "frame_ious.csv"):
        a, b = (run / name for run in outputs)
        if not a.exists():
            continue
        assert a.read_bytes() == b.read_bytes(), f"{name} differs between identical runs"
        compared.append(name)
    assert "metrics.csv" in compared and "metrics_summary.csv" in compared
    return f"{', '.join(compared)} byte-identical across independent retrains"
