"""Walk one synthetic image through the auxiliary-box pipeline.

Train a detector briefly, then show which auxiliary boxes survive each stage:
known-overlap removal, cost scoring against the predictions, threshold
filtering, and Hungarian assignment to unmatched queries.

    python3 demos/pseudo_label_pipeline.py --steps 300
"""

import argparse

import numpy as np
import torch

from owdet.asf import remove_known_overlaps, score_candidates, soft_weight
from owdet.benchmark import TrendSetting, train_variant, trend_data
from owdet.evaluation import images_to_tensor
from owdet.matching import match_pseudo

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=300)
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--image", type=int, default=0)
args = parser.parse_args()
torch.set_num_threads(1)

setting = TrendSetting(train_images=60, test_images=10, steps=args.steps)
data = trend_data(args.seed, setting)
model, cfg = train_variant(args.seed, "asf", setting, data)
train_records, aux, _ = data

record = train_records[args.image]
known = [box for box, c in record.annotations if c in cfg.schedule.known(1)]
hidden = [box for box, c in record.annotations if c not in cfg.schedule.known(1)]
print(f"image {record.image_id}: {len(known)} annotated known objects, {len(hidden)} unannotated distractors")
print(f"auxiliary boxes: {len(aux[record.image_id])}")

# stage 1: drop boxes that duplicate an annotated object
candidates = remove_known_overlaps(aux[record.image_id], known, cfg.asf.overlap_cutoff)
print(f"after known-overlap removal: {len(candidates)}")

model.eval()
with torch.no_grad():
    out = model(images_to_tensor([record.image]))
p_obj = out.p_obj[0].double().numpy()
boxes = out.pred_boxes[0].double().numpy()

# stage 2: each candidate keeps its best prediction's cost
costs, best = score_candidates(candidates, p_obj, boxes, cfg.asf.alpha)
for a, c, q in sorted(zip(candidates, costs, best), key=lambda t: -t[1]):
    tag = "keep" if c >= cfg.asf.threshold else "drop"
    print(f"  {tag}  cost {c:.3f}  via query {q:2d}  box {np.round(a.box.as_list(), 3).tolist()}")

# stage 3: threshold, then one-to-one assignment among queries
kept = [a.box.as_list() for a, c in zip(candidates, costs) if c >= cfg.asf.threshold]
if kept:
    pairs = match_pseudo(range(len(boxes)), np.array(kept), p_obj, boxes, cfg.asf.alpha)
    print(f"pseudo-matched (query, label): {pairs}")

# soft weights fall off with distance from the objectness Gaussian
d2 = out.obj_dist_sq[0].double().numpy() / model.config.embed_dim
print("soft weight quartiles over queries:", np.round(np.quantile(soft_weight(d2), [0.25, 0.5, 0.75]), 3))
