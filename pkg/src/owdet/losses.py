"""Training objectives.

All functions take batch-level tensors plus per-image index lists and return
scalar tensors, so they compose with autograd.  Normalization: detection and
objectness terms divide by the number of annotated boxes in the batch, the two
pseudo terms by the number of pseudo pairs (both floored at one).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .geometry import generalized_box_iou
from .matching import MatchResult


class PairingMismatch(ValueError):
    pass


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    obj: float = 8e-4
    obj_pse: float = 8e-5
    reg_pse: float = 5.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    def as_terms(self) -> dict[str, float]:
        return {
            "cls": self.cls,
            "l1": self.l1,
            "giou": self.giou,
            "obj": self.obj,
            "aux_obj": self.obj_pse,
            "aux_reg": self.reg_pse,
        }


TERMS = ("cls", "l1", "giou", "obj", "aux_obj", "aux_reg")


@dataclass
class LossReport:
    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    step: int | None = None
    extras: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        rec = {"step": self.step, **{f"loss_{k}": v for k, v in self.terms.items()}, "total": self.total}
        rec.update(self.extras)
        return json.dumps(rec)


def total_loss(terms: dict[str, Tensor], weights: LossWeights, step: int | None = None) -> tuple[Tensor, LossReport]:
    """Weighted sum of the loss terms and an itemized report."""
    w = weights.as_terms()
    missing = set(TERMS) - set(terms)
    if missing:
        raise KeyError(f"missing loss terms: {sorted(missing)}")
    total = sum(w[k] * terms[k] for k in TERMS)
    values = {k: float(torch.as_tensor(terms[k]).detach()) for k in TERMS}
    report = LossReport(values, w, float(total.detach()), step)
    return total, report


def num_boxes(targets) -> int:
    return max(1, sum(len(t["labels"]) for t in targets))


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss (unreduced)."""
    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        loss = (alpha * targets + (1 - alpha) * (1 - targets)) * loss
    return loss


def _matched_index(matches: list[MatchResult]):
    batch, pred, gt = [], [], []
    for b, m in enumerate(matches):
        for p, g in m.matched:
            batch.append(b)
            pred.append(p)
            gt.append(g)
    return batch, pred, gt


def layer_detection_losses(logits: Tensor, boxes: Tensor, targets, matches: list[MatchResult], norm: int):
    """Focal classification over all queries plus L1 and GIoU over matched pairs."""
    onehot = torch.zeros_like(logits)
    batch, pred, gt = _matched_index(matches)
    if batch:
        labels = torch.cat([targets[b]["labels"][[g]] for b, g in zip(batch, gt)])
        onehot[batch, pred, labels] = 1.0
    loss_cls = sigmoid_focal_loss(logits, onehot).sum() / norm
    if not batch:
        zero = boxes.sum() * 0.0
        return loss_cls, zero, zero
    src = boxes[batch, pred]
    tgt = torch.stack([targets[b]["boxes"][g] for b, g in zip(batch, gt)]).to(src.dtype)
    loss_l1 = (src - tgt).abs().sum() / norm
    loss_giou = (1 - torch.diag(generalized_box_iou(src, tgt))).sum() / norm
    return loss_cls, loss_l1, loss_giou


def detection_losses(outputs, targets, matches_per_layer: dict[int, list[MatchResult]]):
    """Sum of the per-layer detection losses over every supervised layer."""
    norm = num_boxes(targets)
    cls = l1 = giou = 0.0
    for layer, logits in outputs.logits.items():
        c, r, g = layer_detection_losses(logits, outputs.boxes[layer], targets, matches_per_layer[layer], norm)
        cls, l1, giou = cls + c, l1 + r, giou + g
    return cls, l1, giou


def objectness_loss(dist_sq: Tensor, matches: list[MatchResult], norm: int = 1) -> Tensor:
    """Sum of squared Mahalanobis distances over known-matched queries."""
    batch, pred, _ = _matched_index(matches)
    if not batch:
        return dist_sq.sum() * 0.0
    return dist_sq[batch, pred].sum() / norm


def _pseudo_index(matches: list[MatchResult]):
    batch, pred, label = [], [], []
    for b, m in enumerate(matches):
        for p, k in m.pseudo_matched:
            batch.append(b)
            pred.append(p)
            label.append(k)
    return batch, pred, label


def soft_weights(dist_sq: Tensor, temperature: float = 1.3, dim: int = 1, enabled: bool = True) -> Tensor:
    """Detached energy weights ``exp(-T * d^2 / dim)``; all ones when disabled."""
    if not enabled:
        return torch.ones_like(dist_sq).detach()
    return torch.exp(-temperature * dist_sq.detach() / dim)


def aux_objectness_loss(dist_sq: Tensor, matches: list[MatchResult], temperature: float = 1.3, dim: int = 1, soft: bool = True) -> Tensor:
    """Soft-weighted squared distance over pseudo-matched queries."""
    batch, pred, _ = _pseudo_index(matches)
    if not batch:
        return dist_sq.sum() * 0.0
    d = dist_sq[batch, pred]
    w = soft_weights(d, temperature, dim, soft)
    return (w * d).sum() / max(1, len(batch))


def aux_regression_loss(
    pred_boxes: Tensor,
    dist_sq: Tensor,
    matches: list[MatchResult],
    pseudo_boxes: list[Tensor],
    temperature: float = 1.3,
    dim: int = 1,
    soft: bool = True,
) -> Tensor:
    """Soft-weighted summed-L1 distance between pseudo-matched boxes and their pseudo labels."""
    batch, pred, label = _pseudo_index(matches)
    if not batch:
        return pred_boxes.sum() * 0.0
    targets = []
    for b, k in zip(batch, label):
        boxes_b = pseudo_boxes[b]
        if k >= len(boxes_b):
            raise PairingMismatch(f"image {b}: pseudo index {k} has no pseudo box")
        targets.append(torch.as_tensor(boxes_b[k], dtype=pred_boxes.dtype))
    tgt = torch.stack(targets)
    w = soft_weights(dist_sq[batch, pred], temperature, dim, soft)
    l1 = (pred_boxes[batch, pred] - tgt).abs().sum(-1)
    return (w * l1).sum() / max(1, len(batch))
