"""Hungarian matching and the Dice / Focal / L1 / GIoU loss suite.

Ground truth carries G instances with per-frame masks, normalized boxes and
visibility flags.  The matching cost between a query and an instance uses
the final masks M, boxes B and scores S averaged over the instance's valid
frames; the training loss additionally supervises the low-resolution masks
M_o against nearest-downsampled ground truth and drives unmatched queries'
scores to zero.

Default weights follow the lineage this head design comes from:
score (class) 2, L1 5, GIoU 2, Dice 5, mask-Focal 2, applied to both mask
scales.  The breakdown reports each term so the weighted recombination can
be checked exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch
from scipy.optimize import linear_sum_assignment

from .head import Predictions


@dataclass
class LossWeights:
    mask_lowres: float = 1.0  # weight of the M_o term
    mask: float = 1.0  # weight of the M term
    box: float = 1.0
    score: float = 2.0
    dice: float = 5.0
    focal_mask: float = 2.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        for name in ("mask_lowres", "mask", "box", "score", "dice", "focal_mask", "l1", "giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query index, gt index)
    cost: float


@dataclass
class GroundTruthInstances:
    masks: torch.Tensor  # (G, T, H, W) binary
    boxes: torch.Tensor  # (G, T, 4) normalized cxcywh
    valid: torch.Tensor  # (G, T) bool

    @property
    def num_instances(self) -> int:
        return self.masks.shape[0]


@dataclass
class LossBreakdown:
    mask_lowres: torch.Tensor
    mask: torch.Tensor
    box: torch.Tensor
    score: torch.Tensor
    total: torch.Tensor

    def detach_floats(self) -> dict[str, float]:
        return {
            "loss_mask_lowres": float(self.mask_lowres.detach()),
            "loss_mask": float(self.mask.detach()),
            "loss_box": float(self.box.detach()),
            "loss_score": float(self.score.detach()),
            "loss_total": float(self.total.detach()),
        }


def dice_loss(pred_logits: torch.Tensor, gt_mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    if pred_logits.shape != gt_mask.shape:
        raise ValueError(f"dice shapes differ: {tuple(pred_logits.shape)} vs {tuple(gt_mask.shape)}")
    p = torch.sigmoid(pred_logits).reshape(-1)
    g = gt_mask.reshape(-1).to(p.dtype)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (p.sum() + g.sum() + smooth)


def focal_loss(pred_logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    t = targets.to(pred_logits.dtype)
    p = torch.sigmoid(pred_logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(pred_logits, t, reduction="none")
    p_t = p * t + (1 - p) * (1 - t)
    alpha_t = alpha * t + (1 - alpha) * (1 - t)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou(box_a: torch.Tensor, box_b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU in [-1, 1] for (cx, cy, w, h) boxes (broadcastable).

    Zero-area boxes contribute IoU 0; the enclosure penalty stays defined.
    """
    a = box_cxcywh_to_xyxy(box_a)
    b = box_cxcywh_to_xyxy(box_b)
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(union))
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclosure = wh_c[..., 0] * wh_c[..., 1]
    penalty = torch.where(
        enclosure > 0, (enclosure - union) / enclosure.clamp(min=1e-12), torch.zeros_like(enclosure)
    )
    return iou - penalty


def downsample_mask(mask: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbor downsample of a (..., H, W) binary mask."""
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by {factor}")
    # nearest sampling at the top-left of each cell block
    return mask[..., ::factor, ::factor]


def _pair_mask_cost(masks: torch.Tensor, gt: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return weights.dice * dice_loss(masks, gt) + weights.focal_mask * focal_loss(masks, gt)


def _pair_box_cost(boxes: torch.Tensor, gt: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    l1 = torch.abs(boxes - gt).sum(dim=-1).mean()
    g = giou(boxes, gt).mean()
    return weights.l1 * l1 + weights.giou * (1.0 - g)


def matching_cost(pred: Predictions, gt: GroundTruthInstances, weights: LossWeights) -> torch.Tensor:
    """(Q, G) cost from final masks, boxes and scores over valid frames."""
    if gt.num_instances < 1:
        raise ValueError("need at least one ground-truth instance")
    q = pred.score_logits.shape[1]
    cost = pred.masks.new_zeros(q, gt.num_instances)
    for g_idx in range(gt.num_instances):
        frames = torch.nonzero(gt.valid[g_idx], as_tuple=False).flatten()
        if frames.numel() == 0:
            raise ValueError(f"ground-truth instance {g_idx} has no valid frames")
        g_masks = gt.masks[g_idx, frames]
        g_boxes = gt.boxes[g_idx, frames]
        vis = torch.ones(frames.numel(), dtype=pred.masks.dtype, device=pred.masks.device)
        for q_idx in range(q):
            mask_term = _pair_mask_cost(pred.masks[frames, q_idx], g_masks, weights)
            box_term = _pair_box_cost(pred.boxes[frames, q_idx], g_boxes, weights)
            score_term = focal_loss(pred.score_logits[frames, q_idx], vis)
            cost[q_idx, g_idx] = weights.mask * mask_term + weights.box * box_term + weights.score * score_term
    return cost


def hungarian_match(cost: torch.Tensor) -> Assignment:
    if torch.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    matrix = cost.detach().cpu().numpy()
    rows, cols = linear_sum_assignment(matrix)
    pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: rc[1])
    total = float(matrix[rows, cols].sum())
    return Assignment(pairs=pairs, cost=total)


def brute_force_match(cost: torch.Tensor) -> Assignment:
    """Exhaustive search over all one-to-one assignments (oracle for tests)."""
    q, g = cost.shape
    matrix = cost.detach().cpu()
    best_pairs, best_cost = None, None
    if g <= q:
        for rows in itertools.permutations(range(q), g):
            total = sum(float(matrix[r, c]) for c, r in enumerate(rows))
            if best_cost is None or total < best_cost:
                best_cost = total
                best_pairs = [(r, c) for c, r in enumerate(rows)]
    else:
        for cols in itertools.permutations(range(g), q):
            total = sum(float(matrix[r, c]) for r, c in enumerate(cols))
            if best_cost is None or total < best_cost:
                best_cost = total
                best_pairs = sorted(((r, c) for r, c in enumerate(cols)), key=lambda rc: rc[1])
    return Assignment(pairs=best_pairs, cost=best_cost)


def total_loss(pred: Predictions, gt: GroundTruthInstances, assignment: Assignment, weights: LossWeights) -> LossBreakdown:
    device = pred.masks.device
    dtype = pred.masks.dtype
    zero = torch.zeros((), device=device, dtype=dtype)
    mask_lo = zero.clone()
    mask_hi = zero.clone()
    box = zero.clone()
    factor = pred.masks.shape[-1] // pred.masks_lowres.shape[-1]

    score_targets = torch.zeros_like(pred.score_logits)
    for q_idx, g_idx in assignment.pairs:
        frames = torch.nonzero(gt.valid[g_idx], as_tuple=False).flatten()
        if frames.numel() == 0:
            raise ValueError(f"matched instance {g_idx} has no valid frames")
        g_masks = gt.masks[g_idx, frames].to(dtype)
        g_lo = downsample_mask(gt.masks[g_idx], factor)[frames].to(dtype)
        mask_lo = mask_lo + _pair_mask_cost(pred.masks_lowres[frames, q_idx], g_lo, weights)
        mask_hi = mask_hi + _pair_mask_cost(pred.masks[frames, q_idx], g_masks, weights)
        box = box + _pair_box_cost(pred.boxes[frames, q_idx], gt.boxes[g_idx, frames], weights)
        score_targets[:, q_idx] = gt.valid[g_idx].to(dtype)
    n = max(len(assignment.pairs), 1)
    mask_lo = mask_lo / n
    mask_hi = mask_hi / n
    box = box / n
    score = focal_loss(pred.score_logits, score_targets)
    total = (
        weights.mask_lowres * mask_lo + weights.mask * mask_hi + weights.box * box + weights.score * score
    )
    return LossBreakdown(mask_lowres=mask_lo, mask=mask_hi, box=box, score=score, total=total)


@dataclass
class MatchResult:
    assignment: Assignment
    breakdown: LossBreakdown


def match_and_loss(pred: Predictions, gt: GroundTruthInstances, weights: LossWeights) -> MatchResult:
    with torch.no_grad():
        cost = matching_cost(pred, gt, weights)
    assignment = hungarian_match(cost)
    return MatchResult(assignment=assignment, breakdown=total_loss(pred, gt, assignment, weights))
