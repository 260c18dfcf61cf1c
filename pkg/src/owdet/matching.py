"""One-to-one assignment of predictions to targets.

``hungarian`` is a dense O(n^2 m) shortest-augmenting-path solver with row
and column potentials.  ``match_known`` builds the set-prediction cost against
annotated boxes; ``match_pseudo`` pairs the leftover predictions with pseudo
unknown boxes using the geometric-mean objectness/IoU score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import box_iou, generalized_box_iou


def hungarian(costs) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment.

    Returns ``min(rows, cols)`` ``(row, col)`` pairs sorted by row.  Costs must
    be finite; rectangular matrices are allowed.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return []
    transposed = n_rows > n_cols
    if transposed:
        c = c.T
        n_rows, n_cols = n_cols, n_rows

    # 1-based bookkeeping; column 0 is the virtual start column.
    u = np.zeros(n_rows + 1)
    v = np.zeros(n_cols + 1)
    owner = np.zeros(n_cols + 1, dtype=np.int64)  # row assigned to column j
    way = np.zeros(n_cols + 1, dtype=np.int64)
    for i in range(1, n_rows + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n_cols + 1, np.inf)
        used = np.zeros(n_cols + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = [(int(owner[j]) - 1, j - 1) for j in range(1, n_cols + 1) if owner[j] != 0]
    if transposed:
        pairs = [(col, row) for row, col in pairs]
    return sorted(pairs)


def assignment_cost(costs, pairs) -> float:
    c = np.asarray(costs, dtype=np.float64)
    return float(np.sum([c[r, k] for r, k in pairs]))


@dataclass
class MatchResult:
    """Index sets produced by the two matchings for one image.

    ``matched`` holds ``(prediction, gt)`` pairs, ``unmatched`` the remaining
    prediction indices and ``pseudo_matched`` ``(prediction, pseudo label)``
    pairs drawn from ``unmatched``.
    """

    matched: list[tuple[int, int]] = field(default_factory=list)
    unmatched: list[int] = field(default_factory=list)
    pseudo_matched: list[tuple[int, int]] = field(default_factory=list)

    def validate(self, num_predictions: int) -> None:
        known = [p for p, _ in self.matched]
        pseudo = [p for p, _ in self.pseudo_matched]
        if len(set(known)) != len(known) or len(set(g for _, g in self.matched)) != len(known):
            raise AssertionError("known matching is not one-to-one")
        if set(known) & set(self.unmatched):
            raise AssertionError("matched and unmatched overlap")
        if sorted(known + list(self.unmatched)) != list(range(num_predictions)):
            raise AssertionError("matched and unmatched do not partition predictions")
        if not set(pseudo) <= set(self.unmatched) or len(set(pseudo)) != len(pseudo):
            raise AssertionError("pseudo matches must be distinct unmatched predictions")


@dataclass(frozen=True)
class MatcherWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def known_cost_matrix(logits, boxes, gt_boxes, gt_labels, weights: MatcherWeights = MatcherWeights()):
    """Cost ``[num_predictions, num_gt]`` between predictions and annotations."""
    logits = torch.as_tensor(logits).detach().double()
    boxes = torch.as_tensor(boxes).detach().double()
    gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
    gt_labels = torch.as_tensor(gt_labels, dtype=torch.long).reshape(-1)
    prob = logits.sigmoid()
    a, g = weights.focal_alpha, weights.focal_gamma
    neg = (1 - a) * prob**g * -(1 - prob + 1e-8).log()
    pos = a * (1 - prob) ** g * -(prob + 1e-8).log()
    cost_cls = pos[:, gt_labels] - neg[:, gt_labels]
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = 1 - generalized_box_iou(boxes, gt_boxes)
    cost = weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou
    return cost.numpy()


def match_known(logits, boxes, gt_boxes, gt_labels, weights: MatcherWeights = MatcherWeights()) -> MatchResult:
    """Hungarian matching of one image's predictions against its annotations."""
    num_preds = len(boxes)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    if len(gt_labels) and gt_labels.max() >= np.shape(logits)[-1]:
        raise ValueError("class logits do not cover every annotated class")
    if len(gt_labels) == 0:
        return MatchResult([], list(range(num_preds)), [])
    pairs = hungarian(known_cost_matrix(logits, boxes, gt_boxes, gt_labels, weights))
    taken = {p for p, _ in pairs}
    return MatchResult(pairs, [i for i in range(num_preds) if i not in taken], [])


def pseudo_cost_matrix(p_obj, pred_boxes, pseudo_boxes, alpha: float) -> np.ndarray:
    """Geometric-mean score ``[num_predictions, num_pseudo]`` (higher is better)."""
    from .asf import matching_cost_array

    p_obj = torch.as_tensor(p_obj, dtype=torch.float64).detach().reshape(-1)
    pred_boxes = torch.as_tensor(pred_boxes, dtype=torch.float64).detach().reshape(-1, 4)
    pseudo_boxes = torch.as_tensor(pseudo_boxes, dtype=torch.float64).reshape(-1, 4)
    ious = box_iou(pred_boxes, pseudo_boxes).numpy()
    return matching_cost_array(p_obj.numpy()[:, None], ious, alpha)


def match_pseudo(unmatched, pseudo_boxes, p_obj, pred_boxes, alpha: float = 0.5) -> list[tuple[int, int]]:
    """Pair unmatched predictions with pseudo unknown boxes maximizing total score.

    ``p_obj`` and ``pred_boxes`` are indexed by prediction; only the
    ``unmatched`` rows take part.  Returns ``(prediction, pseudo)`` pairs.
    """
    unmatched = list(unmatched)
    if len(unmatched) == 0 or len(pseudo_boxes) == 0:
        return []
    p_obj = torch.as_tensor(p_obj, dtype=torch.float64).reshape(-1)[unmatched]
    pred_boxes = torch.as_tensor(pred_boxes, dtype=torch.float64).reshape(-1, 4)[unmatched]
    score = pseudo_cost_matrix(p_obj, pred_boxes, pseudo_boxes, alpha)
    pairs = hungarian(-score)
    return sorted((unmatched[r], k) for r, k in pairs)
