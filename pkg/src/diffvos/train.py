"""Training loops and evaluation.

Three phases:
  1. `pretrain_codec`   — L2 frame reconstruction; codec is then frozen.
  2. `pretrain_generator` — standard denoising objective (predict the noise
     added to the latents at a random schedule step, conditioned on the
     prompt); trains the U-Net plus the conditioning towers, then freezes.
  3. `train_rvos` — referring segmentation; only the prompt builder, the
     word tower, the noise predictor and the mask head receive updates, and
     the frozen-part checksums are verified before and after.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import synth
from .config import ExperimentConfig
from .head import select_instance
from .losses import GroundTruthInstances, LossWeights, match_and_loss
from .metrics import evaluate_video, hq_ratio, iou_diff_dataset, map_suite, region_similarity
from .model import RvosModel, frozen_checksums
from .noise import ScheduleConfig, blend_alpha


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite value for diagnostics."""

    def __init__(self, step: int, last_finite: float):
        super().__init__(f"non-finite loss at step {step}; last finite loss was {last_finite:.6f}")
        self.step = step
        self.last_finite = last_finite


class FrozenWeightError(RuntimeError):
    """A frozen part's checksum changed during referring training."""


# -- data ----------------------------------------------------------------------


def make_dataset(cfg: ExperimentConfig, split: str) -> list[synth.RenderedSample]:
    data = cfg.data
    scene_cfg = synth.SceneConfig(
        num_frames=data.num_frames,
        height=data.height,
        width=data.width,
        min_objects=data.min_objects,
        max_objects=data.max_objects,
    )
    if split == "train":
        start, count = data.train_seed, data.num_train
    elif split == "eval":
        start, count = data.eval_seed, data.num_eval
    else:
        raise ValueError(f"unknown split {split!r}")
    return [synth.generate_scene(synth.sample_scene_spec(seed, scene_cfg)) for seed in range(start, start + count)]


def ground_truth(sample: synth.RenderedSample) -> GroundTruthInstances:
    """The referent as a one-instance ground-truth set (normalized cxcywh boxes)."""
    t, h, w = sample.gt_masks.shape
    masks = torch.from_numpy(sample.gt_masks).float().unsqueeze(0)
    xyxy = torch.from_numpy(sample.gt_boxes).float()
    scale = torch.tensor([w, h, w, h], dtype=torch.float32)
    x1, y1, x2, y2 = (xyxy / scale).unbind(-1)
    boxes = torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1).unsqueeze(0)
    valid = torch.from_numpy(sample.valid).unsqueeze(0)
    return GroundTruthInstances(masks=masks, boxes=boxes, valid=valid)


# -- codec pretraining -----------------------------------------------------------


SGD_SETTLE_STEPS = 300
SGD_SETTLE_LR = 0.5


def _codec_lr_at(step: int, steps: int, peak: float) -> float | None:
    """Adam learning rate after the settling phase: short linear ramp, then
    cosine decay to 1% of peak.  Returns None while still in the SGD phase."""
    if step < SGD_SETTLE_STEPS:
        return None
    i = step - SGD_SETTLE_STEPS
    span = max(1, steps - SGD_SETTLE_STEPS)
    ramp = min(1.0, (i + 1) / 100)
    frac = i / span
    floor = 0.01 * peak
    return ramp * (floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


CODEC_BATCH_FRAMES = 8


def pretrain_codec(codec, samples, *, steps: int, lr: float, seed: int = 0) -> list[float]:
    """L2 reconstruction pretraining; returns the per-step loss history.

    Two phases: plain SGD for the first `SGD_SETTLE_STEPS` steps (adaptive
    optimizers take erratic early steps before their gradient statistics are
    calibrated, visibly non-monotone even on a fixed batch), then Adam with a
    cosine decay from `lr`, which is what actually reaches good
    reconstructions — SGD alone plateaus far short.

    The codec is per-frame, so clips are flattened into one frame bank and
    each step trains on distinct frames drawn across clips; batches built
    from a single clip's frames are too correlated to generalise well.
    """
    rng = np.random.default_rng(seed)
    bank = torch.from_numpy(np.concatenate([sample.frames for sample in samples], axis=0))
    batch = min(CODEC_BATCH_FRAMES, len(bank))
    sgd = torch.optim.SGD(codec.parameters(), lr=SGD_SETTLE_LR)
    adam = torch.optim.Adam(codec.parameters(), lr=lr)
    history: list[float] = []
    for step in range(steps):
        adam_lr = _codec_lr_at(step, steps, lr)
        opt = sgd if adam_lr is None else adam
        if adam_lr is not None:
            for group in adam.param_groups:
                group["lr"] = adam_lr
        frames = bank[torch.from_numpy(rng.choice(len(bank), size=batch, replace=False))]
        loss = codec.reconstruction_loss(frames)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, history[-1] if history else float("nan"))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(value)
    return history


# -- generator pretraining --------------------------------------------------------

_PRETRAIN_MODES = ("T", "I", "IT")


@dataclass
class PretrainLog:
    val_before: float
    val_after: float
    history: list[float] = field(default_factory=list)

    @property
    def drop_ratio(self) -> float:
        if self.val_before == 0:
            return 0.0
        return 1.0 - self.val_after / self.val_before


def _denoise_loss(unet, cond, latents, frames, expression, *, mode: str, step: int, eps: torch.Tensor, schedule: ScheduleConfig):
    text = cond.encode_text(expression)
    images = cond.encode_frames(frames)
    prompts = cond.build_prompt(text, images, mode=mode, fusion="attention")
    noisy = blend_alpha(latents, eps, schedule.alpha(step), schedule.noise_scale(step))
    steps_t = torch.full((latents.shape[0],), float(step))
    pred = unet(noisy, prompts.p_ve, steps_t)
    return torch.mean((pred - eps) ** 2)


def pretrain_generator(unet, cond, codec, samples, *, steps: int, lr: float, seed: int = 0, max_noise_step: int = 1000, val_videos: int = 4) -> PretrainLog:
    """Denoising pretraining over mixed conditioning modes (cycling T/I/IT).

    The codec must already be frozen; the U-Net, both prompt towers and the
    prompt builder train jointly.  The noising here always follows the
    variance-preserving form (signal sqrt(abar), noise sqrt(1-abar)) — that is
    what makes "predict the added noise" well-posed across the whole schedule.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    schedule = ScheduleConfig(convention="sqrt")
    params = list(unet.parameters()) + list(cond.text_cond.parameters()) + list(cond.vision.parameters()) + list(cond.prompts.parameters())
    opt = torch.optim.Adam(params, lr=lr)

    latent_cache: dict[int, torch.Tensor] = {}

    def latents_of(idx: int) -> torch.Tensor:
        if idx not in latent_cache:
            frames = torch.from_numpy(samples[idx].frames)
            with torch.no_grad():
                latent_cache[idx] = codec.encode_latents(frames)
        return latent_cache[idx]

    val_gen = torch.Generator().manual_seed(seed + 1)
    val_items = []
    for i in range(min(val_videos, len(samples))):
        lat = latents_of(i)
        val_items.append(
            (
                i,
                _PRETRAIN_MODES[i % len(_PRETRAIN_MODES)],
                int(torch.randint(max_noise_step, (1,), generator=val_gen)),
                torch.randn(lat.shape, generator=val_gen),
            )
        )

    def val_loss() -> float:
        total = 0.0
        with torch.no_grad():
            for idx, mode, step, eps in val_items:
                frames = torch.from_numpy(samples[idx].frames)
                total += float(
                    _denoise_loss(unet, cond, latents_of(idx), frames, samples[idx].expression, mode=mode, step=step, eps=eps, schedule=schedule)
                )
        return total / len(val_items)

    log = PretrainLog(val_before=val_loss(), val_after=float("nan"))
    noise_gen = torch.Generator().manual_seed(seed + 2)
    modes = itertools.cycle(_PRETRAIN_MODES)
    for step in range(steps):
        idx = int(rng.integers(len(samples)))
        sample = samples[idx]
        lat = latents_of(idx)
        eps = torch.randn(lat.shape, generator=noise_gen)
        s = int(rng.integers(max_noise_step))
        loss = _denoise_loss(
            unet, cond, lat, torch.from_numpy(sample.frames), sample.expression, mode=next(modes), step=s, eps=eps, schedule=schedule
        )
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, log.history[-1] if log.history else float("nan"))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.history.append(value)
    log.val_after = val_loss()
    return log


def train_backbone(cfg: ExperimentConfig, samples):
    """Pretrains codec then generator on `samples`.

    Returns (codec_state, generator_states, codec_history, generator_log)
    where generator_states maps part name -> state dict for every module that
    `build_rvos_model` warm-starts.
    """
    torch.manual_seed(cfg.seed)
    model = RvosModel(cfg.unet, cfg.head)
    pc = cfg.pretrain
    history = pretrain_codec(model.codec, samples, steps=pc.codec_steps, lr=pc.codec_lr, seed=cfg.seed)
    model.codec.requires_grad_(False)
    log = pretrain_generator(
        model.unet,
        model.cond,
        model.codec,
        samples,
        steps=pc.generator_steps,
        lr=pc.generator_lr,
        seed=cfg.seed,
        max_noise_step=pc.max_noise_step,
        val_videos=pc.val_videos,
    )
    gen_states = {
        "unet": model.unet.state_dict(),
        "text_cond": model.cond.text_cond.state_dict(),
        "vision": model.cond.vision.state_dict(),
        "prompts": model.cond.prompts.state_dict(),
    }
    return model.codec.state_dict(), gen_states, history, log


# -- referring training ------------------------------------------------------------


@dataclass
class RvosLog:
    loss_rows: list[tuple]  # (step, lr, total, mask_lowres, mask, box, score)
    snapshots: list[tuple]  # (step, jf)
    checksums_before: dict[str, str]
    checksums_after: dict[str, str]


LOSS_HEADER = ("step", "lr", "total", "mask_lowres", "mask", "box", "score")


def build_rvos_model(cfg: ExperimentConfig, codec_state: dict, generator_state: dict) -> RvosModel:
    torch.manual_seed(cfg.seed)
    model = RvosModel(cfg.unet, cfg.head)
    model.codec.load_state_dict(codec_state)
    model.unet.load_state_dict(generator_state["unet"])
    model.cond.text_cond.load_state_dict(generator_state["text_cond"])
    model.cond.vision.load_state_dict(generator_state["vision"])
    model.cond.prompts.load_state_dict(generator_state["prompts"])
    model.freeze_backbone()
    return model


def train_rvos(cfg: ExperimentConfig, model: RvosModel, train_samples, eval_samples=None, *, progress=None) -> RvosLog:
    if cfg.documentation_only:
        raise ValueError(f"preset {cfg.preset!r} is a documentation-only record, not a runnable configuration")
    torch.manual_seed(cfg.seed)
    model.freeze_backbone()
    before = frozen_checksums(model)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.optimizer.lr)
    schedule = ScheduleConfig(step=cfg.step, convention=cfg.convention)
    weights = cfg.loss

    frozen_cache: dict[int, object] = {}
    gt_cache: dict[int, GroundTruthInstances] = {}
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []

    log = RvosLog(loss_rows=[], snapshots=[], checksums_before=before, checksums_after={})
    lr_now = cfg.optimizer.lr
    for step in range(cfg.train.steps):
        if not order:
            order = list(rng.permutation(len(train_samples)))
        idx = int(order.pop())
        sample = train_samples[idx]
        if idx not in frozen_cache:
            with torch.no_grad():
                frozen_cache[idx] = model.precompute(torch.from_numpy(sample.frames), sample.expression)
            gt_cache[idx] = ground_truth(sample)

        if step in cfg.optimizer.decay_steps:
            lr_now *= cfg.optimizer.decay_factor
            for group in opt.param_groups:
                group["lr"] = lr_now

        preds = model(
            None,
            mode=cfg.mode,
            fusion=cfg.fusion,
            noise_mode=cfg.noise,
            schedule=schedule,
            noise_seed=cfg.seed * 1_000_003 + step,
            frozen=frozen_cache[idx],
        )
        result = match_and_loss(preds, gt_cache[idx], weights)
        breakdown = result.breakdown
        total = breakdown.total
        value = float(total.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(step, log.loss_rows[-1][2] if log.loss_rows else float("nan"))
        opt.zero_grad(set_to_none=True)
        if total.requires_grad:
            total.backward()
            torch.nn.utils.clip_grad_norm_((p for p in model.trainable_parameters()), 5.0)
            opt.step()
        parts = breakdown.detach_floats()
        log.loss_rows.append(
            (step, lr_now, value, parts["loss_mask_lowres"], parts["loss_mask"], parts["loss_box"], parts["loss_score"])
        )
        if progress is not None and (step + 1) % 100 == 0:
            progress(step + 1, value)
        if cfg.train.eval_every and eval_samples and (step + 1) % cfg.train.eval_every == 0 and (step + 1) < cfg.train.steps:
            subset = eval_samples[: cfg.train.snapshot_videos]
            snap = evaluate(model, subset, cfg)
            log.snapshots.append((step + 1, snap.summary["jf"]))

    log.checksums_after = frozen_checksums(model)
    if log.checksums_after != before:
        changed = sorted(k for k in before if before[k] != log.checksums_after.get(k))
        raise FrozenWeightError(f"frozen parts changed during referring training: {changed}")
    return log


# -- evaluation --------------------------------------------------------------------


@dataclass
class EvalResult:
    rows: list[tuple]  # (video_id, j, f, jf)
    frame_ious: list[list[float]]  # per video, per frame
    frame_scores: list[list[float]]  # matching confidences
    summary: dict[str, float]

    HEADER = ("video_id", "j", "f", "jf")


def predict_video(model: RvosModel, sample: synth.RenderedSample, cfg: ExperimentConfig, *, step: int | None = None, convention: str | None = None, noise_seed: int | None = None):
    """Segment one clip: returns (bool masks (T,H,W), per-frame confidences)."""
    schedule = ScheduleConfig(
        step=cfg.step if step is None else step,
        convention=cfg.convention if convention is None else convention,
    )
    with torch.no_grad():
        preds = model(
            torch.from_numpy(sample.frames),
            sample.expression,
            mode=cfg.mode,
            fusion=cfg.fusion,
            noise_mode=cfg.noise,
            schedule=schedule,
            noise_seed=cfg.seed if noise_seed is None else noise_seed,
        )
        query = select_instance(preds.score_logits)
        masks = (preds.masks[:, query] > 0).numpy()
        confidences = preds.scores[:, query].numpy()
    return masks, confidences


def _lagged_diff(frame_ious, k: int) -> float:
    """iou_diff(k) over the videos long enough for lag k; NaN if none are."""
    usable = [series for series in frame_ious if len(series) > k]
    if not usable:
        return float("nan")
    return iou_diff_dataset(usable, k)


def evaluate(model: RvosModel, samples, cfg: ExperimentConfig, *, step: int | None = None, convention: str | None = None) -> EvalResult:
    was_training = model.training
    model.eval()
    rows, frame_ious, frame_scores = [], [], []
    for i, sample in enumerate(samples):
        masks, confidences = predict_video(model, sample, cfg, step=step, convention=convention, noise_seed=cfg.seed + i)
        record = evaluate_video(masks, sample.gt_masks, sample.video_id)
        rows.append((record.video_id, record.j, record.f, record.jf))
        frame_ious.append([region_similarity(m, g) for m, g in zip(masks, sample.gt_masks)])
        frame_scores.append([float(c) for c in confidences])
    if was_training:
        model.train()

    js = [r[1] for r in rows]
    fs = [r[2] for r in rows]
    jfs = [r[3] for r in rows]
    flat_ious = [iou for series in frame_ious for iou in series]
    summary = {
        "j": 100.0 * float(np.mean(js)),
        "f": 100.0 * float(np.mean(fs)),
        "jf": 100.0 * float(np.mean(jfs)),
        "iou_diff_1": 100.0 * _lagged_diff(frame_ious, 1),
        "iou_diff_5": 100.0 * _lagged_diff(frame_ious, 5),
        "hq_ratio": 100.0 * hq_ratio(flat_ious),
    }
    summary["map"] = 100.0 * _frame_map(flat_ious, [s for row in frame_scores for s in row])
    return EvalResult(rows=rows, frame_ious=frame_ious, frame_scores=frame_scores, summary=summary)


def _frame_map(ious: list[float], scores: list[float]) -> float:
    """mAP over IoU thresholds 0.50:0.05:0.95, one sample per annotated frame."""
    from .metrics import MAP_THRESHOLDS, average_precision

    if not ious:
        return 0.0
    arr = np.asarray(ious)
    sc = np.asarray(scores)
    return float(np.mean([average_precision(arr, sc, tau) for tau in MAP_THRESHOLDS]))
