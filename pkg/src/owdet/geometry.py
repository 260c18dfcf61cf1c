"""Box representations, overlap measures and mask-to-box extraction.

Boxes are normalized to the image and stored in center-size form
``(cx, cy, w, h)``.  Corner form ``(x1, y1, x2, y2)`` is derived on demand.

Three flavours of the same operations live here:

* :class:`Box` plus :func:`iou` / :func:`generalized_iou` for single boxes,
* ``pairwise_iou`` on numpy arrays, used by the evaluator,
* ``box_iou`` / ``generalized_box_iou`` on torch tensors, used by the
  matcher and the losses (differentiable).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor


class EmptyMask(ValueError):
    """Raised when a box is requested for a mask with no set pixel."""


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise InvalidBox(f"center outside [0, 1]: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise InvalidBox(f"size outside (0, 1]: {vals}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_sequence(cls, seq: Sequence[float]) -> "Box":
        if len(seq) != 4:
            raise InvalidBox(f"expected 4 values, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list(), dtype=np.float64)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


# --------------------------------------------------------------------------
# numpy, pairwise


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = np.moveaxis(boxes, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape ``[len(a), len(b)]`` for center-size boxes."""
    a = cxcywh_to_xyxy(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = cxcywh_to_xyxy(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def pairwise_generalized_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iou_ = pairwise_iou(a, b)
    a, b = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    union = area_a[:, None] + area_b[None, :] - wh[..., 0] * wh[..., 1]
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    enclosing = np.prod(erb - elt, axis=-1)
    return iou_ - (enclosing - union) / enclosing


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(a.as_array(), b.as_array())[0, 0])


def generalized_iou(a: Box, b: Box) -> float:
    return float(pairwise_generalized_iou(a.as_array(), b.as_array())[0, 0])


# --------------------------------------------------------------------------
# torch, differentiable


def box_cxcywh_to_xyxy(boxes: Tensor) -> Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: Tensor) -> Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def _inter_union(b1: Tensor, b2: Tensor) -> tuple[Tensor, Tensor]:
    area1 = (b1[:, 2] - b1[:, 0]) * (b1[:, 3] - b1[:, 1])
    area2 = (b2[:, 2] - b2[:, 0]) * (b2[:, 3] - b2[:, 1])
    lt = torch.max(b1[:, None, :2], b2[None, :, :2])
    rb = torch.min(b1[:, None, 2:], b2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter, area1[:, None] + area2[None, :] - inter


def box_iou(boxes1: Tensor, boxes2: Tensor) -> Tensor:
    """Pairwise IoU for center-size tensors ``[N, 4]`` x ``[M, 4]``."""
    inter, union = _inter_union(box_cxcywh_to_xyxy(boxes1), box_cxcywh_to_xyxy(boxes2))
    return inter / union


def generalized_box_iou(boxes1: Tensor, boxes2: Tensor) -> Tensor:
    """Pairwise generalized IoU for center-size tensors."""
    b1, b2 = box_cxcywh_to_xyxy(boxes1), box_cxcywh_to_xyxy(boxes2)
    inter, union = _inter_union(b1, b2)
    lt = torch.min(b1[:, None, :2], b2[None, :, :2])
    rb = torch.max(b1[:, None, 2:], b2[None, :, 2:])
    enclosing = (rb - lt).clamp(min=0).prod(-1)
    return inter / union - (enclosing - union) / enclosing


# --------------------------------------------------------------------------
# masks


def mask_to_box(mask: np.ndarray, image_w: int | None = None, image_h: int | None = None) -> Box:
    """Tightest box around the set pixels of a binary mask.

    Pixel ``(r, c)`` covers ``[c, c + 1) x [r, r + 1)``; the mask is assumed
    to cover the whole image, so coordinates are normalized by the mask size.
    ``image_w`` / ``image_h`` are only checked against the mask shape.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    height, width = mask.shape
    if (image_w is not None and image_w != width) or (image_h is not None and image_h != height):
        raise ValueError(f"mask shape {mask.shape} does not match image {image_h}x{image_w}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMask("mask has no set pixel")
    x1, x2 = cols[0] / width, (cols[-1] + 1) / width
    y1, y2 = rows[0] / height, (rows[-1] + 1) / height
    return Box.from_corners(x1, y1, x2, y2)


def box_to_mask(box: Box, width: int, height: int) -> np.ndarray:
    """Rasterize a box: pixels whose cell lies inside the box."""
    x1, y1, x2, y2 = box.corners
    cols = np.arange(width)
    rows = np.arange(height)
    cin = (cols >= np.floor(x1 * width + 1e-9)) & (cols + 1 <= np.ceil(x2 * width - 1e-9))
    rin = (rows >= np.floor(y1 * height + 1e-9)) & (rows + 1 <= np.ceil(y2 * height - 1e-9))
    return rin[:, None] & cin[None, :]
