"""Auxiliary supervision: turning external segmentation boxes into pseudo unknowns.

Per image the pipeline is::

    auxiliary boxes -> drop boxes overlapping known annotations
                    -> score each against the predictions (objectness x IoU)
                    -> keep scores >= threshold, sorted descending

The surviving :class:`PseudoLabel` objects are then paired with unmatched
predictions by :func:`owdet.matching.match_pseudo`, and every pair is weighted
by :func:`soft_weight` in the auxiliary losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import Box, InvalidBox, boxes_to_array, pairwise_iou

AUX_SCHEMA_VERSION = 1

# Settings of the segmentation run the auxiliary files are meant to come from.
# Recorded in every written file; nothing here reads them back.
SEGMENTATION_PROVENANCE = {
    "generator": "segment-anything automatic mask generator, everything mode",
    "points_per_side": 32,
    "pred_iou_thresh": 0.95,
    "stability_score_thresh": 0.95,
    "min_mask_region_area": 200,
    "box": "minimum enclosing axis-aligned rectangle of each mask",
}


@dataclass(frozen=True)
class AuxiliaryBox:
    box: Box
    predicted_iou: float | None = None
    stability: float | None = None


@dataclass
class PseudoLabel:
    box: Box
    cost: float
    prediction: int | None = None


@dataclass
class AsfConfig:
    enabled: bool = True
    alpha: float = 0.5
    threshold: float = 0.7
    overlap_cutoff: float = 0.5
    temperature: float = 1.3
    # Ablation switches: raw auxiliary boxes are ``filter=False, soft_weights=False``.
    filter: bool = True
    soft_weights: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if not 0.0 <= self.overlap_cutoff <= 1.0:
            raise ValueError(f"overlap_cutoff must lie in [0, 1], got {self.overlap_cutoff}")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")


def remove_known_overlaps(aux: list[AuxiliaryBox], known_gt: list[Box], cutoff: float = 0.5) -> list[AuxiliaryBox]:
    """Keep auxiliary boxes whose IoU with every known box is <= ``cutoff``."""
    if not aux or not known_gt:
        return list(aux)
    ious = pairwise_iou(boxes_to_array(a.box for a in aux), boxes_to_array(known_gt))
    return [a for a, row in zip(aux, ious) if row.max() <= cutoff]


def matching_cost(p_obj: float, pred_box: Box, aux_box: Box, alpha: float = 0.5) -> float:
    """``p_obj ** alpha * IoU(pred_box, aux_box) ** (1 - alpha)``, with ``0 ** 0 = 1``."""
    return float(matching_cost_array(p_obj, pairwise_iou(pred_box.as_array(), aux_box.as_array())[0, 0], alpha))


def matching_cost_array(p_obj, ious, alpha: float):
    p_obj = np.asarray(p_obj, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    # np.power(0.0, 0.0) == 1.0, which gives the exact collapse at alpha in {0, 1}
    return np.power(p_obj, alpha) * np.power(ious, 1.0 - alpha)


def soft_weight(dist_sq, temperature: float = 1.3):
    """Energy-score weight ``exp(-T * d^2)`` in (0, 1]."""
    dist_sq = np.asarray(dist_sq, dtype=np.float64)
    if np.any(dist_sq < 0):
        raise ValueError("squared distance must be nonnegative")
    out = np.exp(-temperature * dist_sq)
    return float(out) if out.ndim == 0 else out


def score_candidates(candidates: list[AuxiliaryBox], p_obj, pred_boxes, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Best score of each candidate over all predictions, and the argmax prediction."""
    p_obj = np.asarray(p_obj, dtype=np.float64).reshape(-1)
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    if not candidates or len(p_obj) == 0:
        return np.zeros(len(candidates)), np.full(len(candidates), -1)
    ious = pairwise_iou(pred_boxes, boxes_to_array(c.box for c in candidates))
    score = matching_cost_array(p_obj[:, None], ious, alpha)
    return score.max(axis=0), score.argmax(axis=0)


def filter_pseudo_labels(candidates: list[AuxiliaryBox], p_obj, pred_boxes, config: AsfConfig) -> list[PseudoLabel]:
    """Score candidates against the predictions and keep the confident ones.

    Each candidate is scored against the prediction maximizing its matching
    cost.  With ``config.filter`` off every candidate is kept (raw mode).
    """
    costs, best = score_candidates(candidates, p_obj, pred_boxes, config.alpha)
    labels = [
        PseudoLabel(c.box, float(s), int(b) if b >= 0 else None)
        for c, s, b in zip(candidates, costs, best)
        if not config.filter or s >= config.threshold
    ]
    # stable sort keeps the file order among equal costs
    labels.sort(key=lambda lbl: -lbl.cost)
    return labels


def pseudo_labels_for_image(aux: list[AuxiliaryBox], known_gt: list[Box], p_obj, pred_boxes, config: AsfConfig) -> list[PseudoLabel]:
    if not config.enabled:
        return []
    candidates = remove_known_overlaps(aux, known_gt, config.overlap_cutoff)
    return filter_pseudo_labels(candidates, p_obj, pred_boxes, config)


# --------------------------------------------------------------------------
# auxiliary-box files


class AuxFileError(ValueError):
    pass


def write_aux_file(path, records: dict, provenance: dict | None = None) -> None:
    """Write ``{image_id: [AuxiliaryBox, ...]}`` as a versioned JSON document."""
    images = []
    for image_id, boxes in records.items():
        entries = []
        for a in boxes:
            entry = {"box": a.box.as_list()}
            if a.predicted_iou is not None:
                entry["predicted_iou"] = a.predicted_iou
            if a.stability is not None:
                entry["stability"] = a.stability
            entries.append(entry)
        images.append({"image_id": image_id, "boxes": entries})
    doc = {
        "schema_version": AUX_SCHEMA_VERSION,
        "kind": "auxiliary_boxes",
        "provenance": provenance if provenance is not None else SEGMENTATION_PROVENANCE,
        "images": images,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_aux_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AuxFileError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("schema_version") != AUX_SCHEMA_VERSION:
        raise AuxFileError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    out: dict = {}
    for rec in doc.get("images", []):
        image_id = rec["image_id"]
        boxes = []
        for entry in rec.get("boxes", []):
            try:
                box = Box.from_sequence(entry["box"])
            except (InvalidBox, KeyError, TypeError) as exc:
                raise AuxFileError(f"{path}: bad auxiliary box in image {image_id!r}: {exc}") from exc
            boxes.append(AuxiliaryBox(box, entry.get("predicted_iou"), entry.get("stability")))
        out[image_id] = boxes
    return out


def aux_from_boxes(boxes: Iterable[Box]) -> list[AuxiliaryBox]:
    return [AuxiliaryBox(b) for b in boxes]
