"""Evaluation metrics: region/contour quality, mAP, temporal stability,
feature-drift and clustering analyses.

Conventions
-----------
* J (region similarity) is mask IoU with empty-vs-empty defined as 1.
* F (contour accuracy) is the boundary F-measure: boundary pixels are
  foreground pixels with a 4-neighbor background pixel (out-of-bounds
  counts as background), matched within radius ceil(0.008 * diagonal)
  (the DAVIS convention).  F = 2PR/(P+R), 0 when P + R = 0, and 1 when
  both masks have no boundary at all.
* J&F is the arithmetic mean of J and F.
* mAP averages AP over the 10 IoU thresholds 0.50, 0.55, ..., 0.95 with
  score-ranked every-point-interpolated precision/recall.  Matching is per
  annotated frame: each frame contributes one selected prediction and one
  ground-truth mask.
* iou_diff(k) is the mean absolute change of per-frame IoU across a frame
  interval k (tables report it x100).
* hq_ratio = count(IoU > 0.9) / count(IoU > 0.5), 0 when the denominator
  is empty.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def region_similarity(pred: np.ndarray, gt: np.ndarray) -> float:
    """IoU of two binary masks; empty against empty counts as 1."""
    _check_pair(pred, gt)
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbor background pixel
    (outside the frame counts as background)."""
    mask = mask.astype(bool)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def match_radius(height: int, width: int) -> int:
    return int(math.ceil(0.008 * math.hypot(height, width)))


def _disk(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    yy, xx = np.meshgrid(span, span, indexing="ij")
    return (yy**2 + xx**2) <= radius**2


def contour_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    _check_pair(pred, gt)
    pb = boundary_pixels(pred)
    gb = boundary_pixels(gt)
    n_pb = int(pb.sum())
    n_gb = int(gb.sum())
    if n_pb == 0 and n_gb == 0:
        return 1.0
    if n_pb == 0 or n_gb == 0:
        return 0.0
    disk = _disk(match_radius(*pred.shape))
    gb_zone = ndimage.binary_dilation(gb, structure=disk)
    pb_zone = ndimage.binary_dilation(pb, structure=disk)
    precision = float((pb & gb_zone).sum() / n_pb)
    recall = float((gb & pb_zone).sum() / n_gb)
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class VideoEval:
    video_id: str
    frame_ious: np.ndarray
    frame_fs: np.ndarray

    @property
    def j(self) -> float:
        return float(self.frame_ious.mean())

    @property
    def f(self) -> float:
        return float(self.frame_fs.mean())

    @property
    def jf(self) -> float:
        return (self.j + self.f) / 2.0


def evaluate_video(pred_masks: np.ndarray, gt_masks: np.ndarray, video_id: str = "video") -> VideoEval:
    if pred_masks.shape != gt_masks.shape:
        raise ValueError(f"clip shapes differ: {pred_masks.shape} vs {gt_masks.shape}")
    ious = np.array([region_similarity(p, g) for p, g in zip(pred_masks, gt_masks)])
    fs = np.array([contour_accuracy(p, g) for p, g in zip(pred_masks, gt_masks)])
    return VideoEval(video_id=video_id, frame_ious=ious, frame_fs=fs)


def average_precision(ious: np.ndarray, scores: np.ndarray, threshold: float) -> float:
    """Every-point-interpolated AP with one prediction per ground truth."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    hits = np.asarray(ious)[order] >= threshold
    n_gt = len(ious)
    cum_tp = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev = 0.0
    for i in range(len(hits)):
        if hits[i]:
            ap += (recall[i] - prev) * envelope[i]
            prev = recall[i]
    return float(ap)


def map_suite(pred_masks: list, scores: list, gt_masks: list):
    """(mAP, Overall IoU, Mean IoU, per-threshold APs) over annotated frames."""
    if len(pred_masks) == 0:
        raise ValueError("empty evaluation set")
    if not (len(pred_masks) == len(scores) == len(gt_masks)):
        raise ValueError("prediction/score/gt counts differ")
    ious = []
    inter_sum = 0
    union_sum = 0
    for p, g in zip(pred_masks, gt_masks):
        _check_pair(np.asarray(p), np.asarray(g))
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        inter_sum += np.logical_and(p, g).sum()
        union_sum += np.logical_or(p, g).sum()
        ious.append(region_similarity(p, g))
    ious = np.asarray(ious)
    scores = np.asarray(scores, dtype=np.float64)
    aps = np.array([average_precision(ious, scores, tau) for tau in MAP_THRESHOLDS])
    overall = float(inter_sum / union_sum) if union_sum > 0 else 1.0
    return float(aps.mean()), overall, float(ious.mean()), aps


def iou_diff(per_frame_ious, k: int) -> float:
    """Mean |IoU_t - IoU_{t+k}| over a single video (raw scale)."""
    series = np.asarray(per_frame_ious, dtype=np.float64)
    if series.ndim != 1:
        raise ValueError("expected a 1-D IoU series")
    if len(series) <= k:
        raise ValueError(f"need more than {k} frames, got {len(series)}")
    return float(np.abs(series[k:] - series[:-k]).mean())


def iou_diff_dataset(series_list, k: int) -> float:
    if not series_list:
        raise ValueError("empty series list")
    return float(np.mean([iou_diff(s, k) for s in series_list]))


def hq_ratio(per_sample_ious) -> float:
    ious = np.asarray(per_sample_ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("empty IoU list")
    moderate = (ious > 0.5).sum()
    if moderate == 0:
        return 0.0
    return float((ious > 0.9).sum() / moderate)


def roi_similarity_decay(features: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Cosine similarity between frame 0's mask-pooled feature vector and
    each later frame's, shape (T-1,).  Frames whose downsampled mask is
    empty are skipped (NaN) with a warning.

    features: (T, h, w, C) level features; gt_masks: (T, H, W) binary with
    H, W integer multiples of h, w.
    """
    t, h, w, _ = features.shape
    if t < 2:
        raise ValueError("need at least two frames")
    big_h, big_w = gt_masks.shape[1:]
    if big_h % h or big_w % w:
        raise ValueError(f"mask {big_h}x{big_w} not divisible by level {h}x{w}")
    fy, fx = big_h // h, big_w // w
    small = gt_masks[:, ::fy, ::fx].astype(bool)

    def roi_vector(i):
        if not small[i].any():
            warnings.warn(f"empty downsampled mask at frame {i}; skipping")
            return None
        return features[i][small[i]].mean(axis=0)

    base = roi_vector(0)
    out = np.full(t - 1, np.nan)
    if base is None:
        return out
    base_norm = np.linalg.norm(base)
    for k in range(1, t):
        vec = roi_vector(k)
        if vec is None:
            continue
        denom = base_norm * np.linalg.norm(vec)
        out[k - 1] = float(np.dot(base, vec) / denom) if denom > 0 else 0.0
    return out


def lighting_curve(eval_fn, dataset, levels, seed: int = 0):
    """Mean IoU per brightness-perturbation level.

    eval_fn(samples) -> mean IoU; each sample's frames are scaled by a
    per-frame factor drawn from [1-level, 1+level].  Level 0 reproduces
    the unperturbed inputs exactly.
    """
    from . import synth

    rows = []
    for level in levels:
        if level < 0:
            raise ValueError("perturbation level must be nonnegative")
        rng = np.random.default_rng(seed + int(round(level * 1000)))
        perturbed = []
        for sample in dataset:
            frames = synth.jitter_clip(sample.frames, rng, level) if level > 0 else sample.frames
            perturbed.append(
                synth.RenderedSample(
                    frames=frames,
                    gt_masks=sample.gt_masks,
                    gt_boxes=sample.gt_boxes,
                    valid=sample.valid,
                    expression=sample.expression,
                    video_id=sample.video_id,
                    referent=sample.referent,
                )
            )
        rows.append((float(level), float(eval_fn(perturbed))))
    return rows


def kmeans_labels(features: np.ndarray, k: int, seed: int, max_iters: int = 100, tol: float = 1e-4):
    """Lloyd's k-means over per-pixel vectors pooled across frames.

    features: (T, h, w, C).  Returns (labels (T, h, w) int array, inertia
    history list).  Stops after `max_iters` iterations or when the relative
    inertia improvement drops below `tol`.
    """
    if k < 2:
        raise ValueError("need K >= 2")
    t, h, w, c = features.shape
    points = features.reshape(-1, c).astype(np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"only {n} pixels for K={k}")
    rng = np.random.default_rng(seed)
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    history = []
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), labels].sum())
        for j in range(k):
            sel = labels == j
            if sel.any():
                centers[j] = points[sel].mean(axis=0)
            else:
                # reseed an empty cluster on the point farthest from its center
                farthest = dists[np.arange(n), labels].argmax()
                centers[j] = points[farthest]
        if history and history[-1] > 0 and (history[-1] - inertia) / history[-1] < tol:
            history.append(inertia)
            break
        history.append(inertia)
    dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    return labels.reshape(t, h, w), history
