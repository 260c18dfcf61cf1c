"""Open-world evaluation: detection post-processing and metrics.

Matching of detections to ground truth follows the VOC rule throughout:
detections are visited by descending score (ties: image id, then query
index), each is assigned to its highest-IoU ground-truth box in the same
image, and counts as a hit only if that IoU reaches the threshold and the box
was not claimed before.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch

from .geometry import pairwise_iou
from .model import combine_scores
from .protocol import UNKNOWN, TaskSchedule


class DegeneratePrecision(ZeroDivisionError):
    pass


@dataclass
class Detection:
    image_id: str
    box: np.ndarray  # cx, cy, w, h
    label: int  # class id or UNKNOWN
    score: float
    query: int = 0

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "box": [float(v) for v in self.box],
            "label": int(self.label),
            "score": float(self.score),
            "query": int(self.query),
        }


def sort_key(d: Detection):
    return (-d.score, d.image_id, d.query)


# --------------------------------------------------------------------------
# post-processing


def select_topk(detections: list[Detection], k: int = 100) -> list[Detection]:
    """The ``k`` highest-scoring detections of one image; ties favour the lower query index."""
    return sorted(detections, key=lambda d: (-d.score, d.query))[:k]


def classify_detection(class_scores, p_obj: float, known_threshold: float = 0.05, unknown_threshold: float = 0.05):
    """Label one query from its combined per-class scores.

    Returns the winning column index if its score clears ``known_threshold``,
    :data:`UNKNOWN` if not but objectness clears ``unknown_threshold``, and
    ``None`` (discard) otherwise.
    """
    class_scores = np.asarray(class_scores, dtype=np.float64)
    if class_scores.size:
        best = int(np.argmax(class_scores))
        if class_scores[best] >= known_threshold:
            return best
    if p_obj >= unknown_threshold:
        return UNKNOWN
    return None


def postprocess_image(image_id: str, p_obj, p_cls, boxes, class_ids: list[int], cfg) -> list[Detection]:
    """Turn one image's query outputs into labelled detections.

    A query's known score is its best combined class score; its unknown score
    combines objectness with ``1 - max class probability``.  Top-k runs on the
    larger of the two, then each survivor is labelled.
    """
    p_obj = np.asarray(p_obj, dtype=np.float64)
    p_cls = np.asarray(p_cls, dtype=np.float64).reshape(len(p_obj), -1)
    boxes = np.asarray(boxes, dtype=np.float64)
    combined = combine_scores(p_obj[:, None], p_cls, cfg.gamma, cfg.score_mode)
    max_cls = p_cls.max(axis=1) if p_cls.shape[1] else np.zeros(len(p_obj))
    known_score = combined.max(axis=1) if p_cls.shape[1] else np.zeros(len(p_obj))
    unknown_score = combine_scores(p_obj, 1.0 - max_cls, cfg.gamma, cfg.score_mode)
    candidates = [
        Detection(image_id, boxes[q], UNKNOWN, float(max(known_score[q], unknown_score[q])), q)
        for q in range(len(p_obj))
    ]
    out = []
    for det in select_topk(candidates, cfg.top_k):
        q = det.query
        col = classify_detection(combined[q], p_obj[q], cfg.known_threshold, cfg.unknown_threshold)
        if col is None:
            continue
        if col == UNKNOWN:
            out.append(Detection(image_id, boxes[q], UNKNOWN, float(unknown_score[q]), q))
        else:
            out.append(Detection(image_id, boxes[q], class_ids[col], float(combined[q, col]), q))
    return out


def images_to_tensor(images: Iterable[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    x = torch.from_numpy(arr).permute(0, 3, 1, 2)
    return ((x / 255.0 - 0.5) / 0.25).to(dtype)


@torch.no_grad()
def predict(model, records, schedule: TaskSchedule, task: int, cfg, batch_size: int = 16) -> list[Detection]:
    was_training = model.training
    model.eval()
    class_ids = schedule.known(task)
    dets: list[Detection] = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            out = model(images_to_tensor([r.image for r in chunk]), num_known=len(class_ids))
            p_cls = out.pred_logits.sigmoid().double().numpy()
            p_obj = out.p_obj.double().numpy()
            boxes = out.pred_boxes.double().numpy()
            for i, r in enumerate(chunk):
                dets.extend(postprocess_image(r.image_id, p_obj[i], p_cls[i], boxes[i], class_ids, cfg))
    finally:
        model.train(was_training)
    return dets


# --------------------------------------------------------------------------
# matching and metrics


def _gt_by_image(gt, label) -> dict[str, np.ndarray]:
    """``gt`` is an iterable of records with ``image_id`` and ``(box, class)`` annotations."""
    out = {}
    for r in gt:
        boxes = [b.as_list() for b, c in r.annotations if c == label]
        out[r.image_id] = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return out


def greedy_match(detections: list[Detection], gt_boxes: dict[str, np.ndarray], iou_threshold: float = 0.5):
    """VOC-rule matching.  Returns per-detection hit flags (in score order) and the claimed boxes."""
    dets = sorted(detections, key=sort_key)
    claimed: dict[str, set[int]] = {}
    hits = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        boxes = gt_boxes.get(d.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        ious = pairwise_iou(np.asarray(d.box)[None], boxes)[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and j not in claimed.setdefault(d.image_id, set()):
            claimed[d.image_id].add(j)
            hits[i] = True
    return dets, hits, claimed


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the precision/recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(detections: list[Detection], gt, class_id: int, iou_threshold: float = 0.5) -> float:
    """AP of ``class_id`` at the given IoU; NaN when the class has no ground truth."""
    gt_boxes = _gt_by_image(gt, class_id)
    npos = sum(len(b) for b in gt_boxes.values())
    if npos == 0:
        return float("nan")
    dets = [d for d in detections if d.label == class_id]
    if not dets:
        return 0.0
    _, hits, _ = greedy_match(dets, gt_boxes, iou_threshold)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    return voc_ap(tp / npos, tp / np.maximum(tp + fp, np.finfo(np.float64).eps))


def unknown_recall(detections: list[Detection], gt, iou_threshold: float = 0.5) -> float | None:
    """Share of unknown ground truth recovered by UNKNOWN detections; ``None`` without unknown ground truth."""
    gt_boxes = _gt_by_image(gt, UNKNOWN)
    total = sum(len(b) for b in gt_boxes.values())
    if total == 0:
        return None
    _, _, claimed = greedy_match([d for d in detections if d.label == UNKNOWN], gt_boxes, iou_threshold)
    return sum(len(v) for v in claimed.values()) / total


def absolute_ose(detections: list[Detection], gt, iou_threshold: float = 0.5) -> int:
    """Number of unknown ground-truth boxes claimed by known-labelled detections."""
    gt_boxes = _gt_by_image(gt, UNKNOWN)
    _, _, claimed = greedy_match([d for d in detections if d.label != UNKNOWN], gt_boxes, iou_threshold)
    return sum(len(v) for v in claimed.values())


def _recall_cut(recall: np.ndarray, level: float) -> int:
    return int(np.argmin(np.abs(recall - level)))


def wilderness_counts(detections, gt, known_classes, iou_threshold: float = 0.5, recall_level: float = 0.8):
    """Pooled ``(tp, fp, fp_open)`` over known classes at the given recall level.

    Per class the ranked list is cut where recall is closest to
    ``recall_level``; ``fp_open`` counts false positives overlapping unknown
    ground truth at IoU >= threshold.
    """
    unk_boxes = _gt_by_image(gt, UNKNOWN)
    tp_total = fp_total = fp_open_total = 0
    for c in known_classes:
        gt_boxes = _gt_by_image(gt, c)
        npos = sum(len(b) for b in gt_boxes.values())
        dets = [d for d in detections if d.label == c]
        if npos == 0 or not dets:
            continue
        dets, hits, _ = greedy_match(dets, gt_boxes, iou_threshold)
        open_fp = np.zeros(len(dets), dtype=bool)
        for i, d in enumerate(dets):
            ub = unk_boxes.get(d.image_id)
            if not hits[i] and ub is not None and len(ub):
                open_fp[i] = pairwise_iou(np.asarray(d.box)[None], ub).max() >= iou_threshold
        tp = np.cumsum(hits)
        cut = _recall_cut(tp / npos, recall_level)
        tp_total += int(tp[cut])
        fp_total += int(np.cumsum(~hits)[cut])
        fp_open_total += int(np.cumsum(open_fp)[cut])
    return tp_total, fp_total, fp_open_total


def wilderness_impact(detections, gt, known_classes, iou_threshold: float = 0.5, recall_level: float = 0.8) -> float:
    """``P_K / P_{K u U} - 1``.

    ``P_K`` is the closed-world precision, where detections landing on unknown
    objects are not counted against the detector; ``P_{K u U}`` counts them
    as false positives.
    """
    tp, fp, fp_open = wilderness_counts(detections, gt, known_classes, iou_threshold, recall_level)
    if tp == 0:
        raise DegeneratePrecision("no true positive among known-class detections")
    p_closed = tp / (tp + fp - fp_open)
    p_open = tp / (tp + fp)
    return p_closed / p_open - 1.0


@dataclass
class MetricReport:
    task: int
    mAP_prev: float | None
    mAP_curr: float | None
    mAP_both: float | None
    U_recall: float | None
    WI: float | None
    A_OSE: int
    per_class_ap: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _mean(values) -> float | None:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


def evaluate(detections: list[Detection], gt, schedule: TaskSchedule, task: int, cfg) -> MetricReport:
    """All open-world metrics for one task.  ``gt`` must carry eval-phase labels."""
    gt = list(gt)
    known = schedule.known(task)
    ap = {c: average_precision(detections, gt, c, cfg.iou_threshold) for c in known}
    try:
        wi = wilderness_impact(detections, gt, known, cfg.iou_threshold, cfg.wi_recall_level)
    except DegeneratePrecision:
        wi = None
    return MetricReport(
        task=task,
        mAP_prev=_mean(ap[c] for c in schedule.previously_known(task)),
        mAP_curr=_mean(ap[c] for c in schedule.current(task)),
        mAP_both=_mean(ap.values()),
        U_recall=unknown_recall(detections, gt, cfg.iou_threshold),
        WI=wi,
        A_OSE=absolute_ose(detections, gt, cfg.iou_threshold),
        per_class_ap=ap,
    )


def write_detections(path, detections: list[Detection]) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_dict()) + "\n")
