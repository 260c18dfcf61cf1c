"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports the package's metric or matching code.
"""

import itertools
import math


def corner_iou(a, b):
    """IoU of two center-size boxes via explicit corner arithmetic."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union


def corner_giou(a, b):
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def brute_force_assignment(costs):
    """Minimum total over every injective map from the smaller side into the larger."""
    n, m = len(costs), len(costs[0]) if costs else 0
    best = math.inf
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            best = min(best, sum(costs[i][c] for i, c in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(n), m):
            best = min(best, sum(costs[r][j] for j, r in enumerate(rows)))
    return best


def brute_force_best_pairing(score, rows, cols):
    """Maximum total score over all pairings of size min(rows, cols)."""
    best = -math.inf
    k = min(len(rows), len(cols))
    for rsel in itertools.permutations(range(len(rows)), k):
        for csel in itertools.combinations(range(len(cols)), k):
            best = max(best, sum(score[r][c] for r, c in zip(rsel, csel)))
    return best


# scenes: dets are dicts {image, box, label, score, query}; gts are dicts {image, box, label}


def _ranked(dets):
    return sorted(dets, key=lambda d: (-d["score"], d["image"], d["query"]))


def _claim(dets, gts, thr):
    """Visit detections in rank order; each claims its best-overlap GT when free."""
    claimed = set()
    hits = []
    for d in _ranked(dets):
        cands = [(i, corner_iou(d["box"], g["box"])) for i, g in enumerate(gts) if g["image"] == d["image"]]
        hit = False
        if cands:
            best_i, best_v = cands[0]
            for i, v in cands[1:]:
                if v > best_v:
                    best_i, best_v = i, v
            if best_v >= thr and best_i not in claimed:
                claimed.add(best_i)
                hit = True
        hits.append(hit)
    return hits, claimed


def oracle_ap(dets, gts, label, thr=0.5):
    """AP as the mean over GT of the best precision at or beyond the rank recovering it."""
    g = [x for x in gts if x["label"] == label]
    if not g:
        return math.nan
    d = [x for x in dets if x["label"] == label]
    hits, _ = _claim(d, g, thr)
    precisions = []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += h
        precisions.append(tp / k)
    total = 0.0
    for k, h in enumerate(hits):
        if h:
            total += max(precisions[k:])
    return total / len(g)


def oracle_unknown_recall(dets, gts, unknown=-1, thr=0.5):
    g = [x for x in gts if x["label"] == unknown]
    if not g:
        return None
    _, claimed = _claim([x for x in dets if x["label"] == unknown], g, thr)
    return len(claimed) / len(g)


def oracle_a_ose(dets, gts, unknown=-1, thr=0.5):
    g = [x for x in gts if x["label"] == unknown]
    _, claimed = _claim([x for x in dets if x["label"] != unknown], g, thr)
    return len(claimed)


def oracle_wi_counts(dets, gts, known, unknown=-1, thr=0.5, level=0.8):
    tp_all = fp_all = open_all = 0
    unk = [x for x in gts if x["label"] == unknown]
    for c in known:
        g = [x for x in gts if x["label"] == c]
        d = [x for x in dets if x["label"] == c]
        if not g or not d:
            continue
        hits, _ = _claim(d, g, thr)
        ranked = _ranked(d)
        best_k, best_gap = None, math.inf
        tp = 0
        for k, h in enumerate(hits):
            tp += h
            gap = abs(tp / len(g) - level)
            if gap < best_gap:
                best_k, best_gap = k, gap
        for k in range(best_k + 1):
            if hits[k]:
                tp_all += 1
            else:
                fp_all += 1
                if any(u["image"] == ranked[k]["image"] and corner_iou(ranked[k]["box"], u["box"]) >= thr for u in unk):
                    open_all += 1
    return tp_all, fp_all, open_all


def random_scene(rng, max_boxes=20, num_images=3, labels=(0, 1, -1)):
    """GT and detections, at most ``max_boxes`` boxes in total."""
    n_gt = int(rng.integers(1, max_boxes // 2 + 1))
    n_det = int(rng.integers(0, max_boxes - n_gt + 1))

    def rand_box():
        w, h = rng.uniform(0.05, 0.5, 2)
        return [float(rng.uniform(w / 2, 1 - w / 2)), float(rng.uniform(h / 2, 1 - h / 2)), float(w), float(h)]

    gts = [{"image": f"im{rng.integers(num_images)}", "box": rand_box(), "label": int(rng.choice(labels))} for _ in range(n_gt)]
    dets = []
    for q in range(n_det):
        if gts and rng.random() < 0.6:
            src = gts[int(rng.integers(len(gts)))]
            box = [float(v) for v in src["box"]]
            box[0] = min(max(box[0] + rng.normal(0, 0.03), box[2] / 2), 1 - box[2] / 2)
            box[1] = min(max(box[1] + rng.normal(0, 0.03), box[3] / 2), 1 - box[3] / 2)
            image = src["image"]
        else:
            box, image = rand_box(), f"im{rng.integers(num_images)}"
        # coarse scores so ties actually occur
        score = float(rng.integers(1, 8)) / 8
        dets.append({"image": image, "box": box, "label": int(rng.choice(labels)), "score": score, "query": q})
    return dets, gts
