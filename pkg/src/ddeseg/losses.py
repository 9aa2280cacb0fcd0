"""Segmentation losses (dice + bce + soft IoU, weighted 5/5/2) and the
evaluation metrics J, F_beta and their mean."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError

EPS = 1.0  # smoothing constant for dice / IoU
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_dice: float = 5.0
    lambda_bce: float = 5.0
    lambda_iou: float = 2.0


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + EPS) / (pred.sum() + target.sum() + EPS)


def bce_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped away from {0, 1}."""
    _check_shapes(pred, target)
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def iou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - (sum(p*t) + eps) / (sum(p) + sum(t) - sum(p*t) + eps)."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    union = pred.sum() + target.sum() - inter
    return 1.0 - (inter + EPS) / (union + EPS)


def total_loss(
    pred: torch.Tensor, target: torch.Tensor, weights: LossWeights = LossWeights()
) -> torch.Tensor:
    """lambda_dice * dice + lambda_bce * bce + lambda_iou * iou."""
    return (
        weights.lambda_dice * dice_loss(pred, target)
        + weights.lambda_bce * bce_loss(pred, target)
        + weights.lambda_iou * iou_loss(pred, target)
    )


def matched_query_loss(
    query_masks: torch.Tensor,
    query_logits: torch.Tensor,
    class_ids: list[int],
    gt_mask: torch.Tensor,
    weights: LossWeights = LossWeights(),
    cls_weight: float = 1.0,
    no_object_weight: float = 0.1,
    empty_weight: float = 0.1,
) -> torch.Tensor:
    """Per-query supervision with class-id matching.

    Ground-truth class c (label c+1 in the mask) supervises the mask of the
    query whose derivation class id is c.  Unmatched queries receive a
    down-weighted "no object" classification term and a lightly weighted
    empty-mask term — light because a full-strength composite on the
    (usually more numerous) unmatched queries drags every mask toward the
    all-empty solution.
    """
    num_classes = query_logits.shape[1] - 1
    no_object = num_classes
    present = set(int(v) - 1 for v in torch.unique(gt_mask).tolist() if v > 0)

    mask_terms = []
    empty_terms = []
    cls_targets = []
    for q, cid in enumerate(class_ids):
        if cid in present:
            target = (gt_mask == cid + 1).to(query_masks.dtype)
            cls_targets.append(cid)
            mask_terms.append(total_loss(query_masks[q], target, weights))
        else:
            cls_targets.append(no_object)
            if empty_weight > 0:
                empty = torch.zeros_like(query_masks[q])
                empty_terms.append(bce_loss(query_masks[q], empty))
    mask_part = (
        torch.stack(mask_terms).mean()
        if mask_terms
        else query_masks.sum() * 0.0
    )
    if empty_terms:
        mask_part = mask_part + empty_weight * torch.stack(empty_terms).mean()
    cls_w = torch.ones(
        num_classes + 1, dtype=query_logits.dtype, device=query_logits.device
    )
    cls_w[no_object] = no_object_weight
    cls_part = torch.nn.functional.cross_entropy(
        query_logits,
        torch.tensor(cls_targets, device=query_logits.device),
        weight=cls_w,
    )
    return mask_part + cls_weight * cls_part


def _per_class_binary(pred: np.ndarray, target: np.ndarray):
    """Yield (class_label, pred_binary, target_binary) for foreground classes
    present in the target."""
    for c in sorted(np.unique(target)):
        if c == 0:
            continue
        yield int(c), pred == c, target == c


def _binary_jaccard(p: np.ndarray, t: np.ndarray) -> float:
    inter = np.logical_and(p, t).sum()
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def _binary_fbeta(p: np.ndarray, t: np.ndarray, beta_sq: float) -> float:
    tp = np.logical_and(p, t).sum()
    if p.sum() == 0 and t.sum() == 0:
        return 1.0
    if p.sum() == 0 or t.sum() == 0 or tp == 0:
        return 0.0
    precision = tp / p.sum()
    recall = tp / t.sum()
    denom = beta_sq * precision + recall
    return float((1.0 + beta_sq) * precision * recall / denom)


def jaccard_metric(pred_mask: np.ndarray, target: np.ndarray) -> float:
    """Jaccard index.  Boolean inputs: plain IoU (1 when both empty).
    Integer semantic maps: mean IoU over foreground classes present in the
    target."""
    pred_mask, target = np.asarray(pred_mask), np.asarray(target)
    if pred_mask.shape != target.shape:
        raise ContractError("shape mismatch")
    if pred_mask.dtype == bool or target.dtype == bool:
        return _binary_jaccard(pred_mask.astype(bool), target.astype(bool))
    vals = [_binary_jaccard(p, t) for _, p, t in _per_class_binary(pred_mask, target)]
    if not vals:  # empty target: fall back to the binary reading
        return _binary_jaccard(pred_mask != 0, target != 0)
    return float(np.mean(vals))


def fbeta_metric(
    pred_mask: np.ndarray, target: np.ndarray, beta_sq: float = 0.3
) -> float:
    """Weighted F-measure ((1+b)PR / (bP + R), b = beta^2 = 0.3 by default);
    semantic maps are averaged over foreground classes present in the
    target."""
    pred_mask, target = np.asarray(pred_mask), np.asarray(target)
    if pred_mask.shape != target.shape:
        raise ContractError("shape mismatch")
    if pred_mask.dtype == bool or target.dtype == bool:
        return _binary_fbeta(pred_mask.astype(bool), target.astype(bool), beta_sq)
    vals = [
        _binary_fbeta(p, t, beta_sq) for _, p, t in _per_class_binary(pred_mask, target)
    ]
    if not vals:
        return _binary_fbeta(pred_mask != 0, target != 0, beta_sq)
    return float(np.mean(vals))


@dataclass
class MetricReport:
    jaccard: float
    fbeta: float
    per_class: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def jf_mean(self) -> float:
        return (self.jaccard + self.fbeta) / 2.0

    def csv_row(self, dataset: str, split: str, seed: int) -> list:
        row = [dataset, split, seed, self.jaccard, self.fbeta, self.jf_mean]
        for c in sorted(self.per_class):
            row.extend([c, *self.per_class[c]])
        return row


def write_metric_csv(path, rows: list[list], header: list[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        writer.writerows(rows)
