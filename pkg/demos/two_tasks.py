"""Two incremental tasks: learn four shapes, then four more with exemplar replay.

The second task's shapes are unknowns during the first task, so the first
evaluation reports their recall; after advancing they become known classes.

    python3 demos/two_tasks.py --steps 600
"""

import argparse

import torch

from owdet.config import ExperimentConfig
from owdet.data import SyntheticSceneSpec, apply_visibility, generate_synthetic
from owdet.engine import advance_task, build_exemplar_store, build_model, train
from owdet.evaluation import evaluate, predict

SHAPES = {0: "square", 1: "disk", 2: "triangle", 3: "plus", 4: "ring", 5: "diamond", 6: "frame", 7: "cross"}

parser = argparse.ArgumentParser()
parser.add_argument("--steps", type=int, default=600)
parser.add_argument("--finetune-steps", type=int, default=200)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
torch.set_num_threads(1)

cfg = ExperimentConfig(seed=args.seed)
cfg.train.lr = 1e-3
cfg.train.steps = args.steps
cfg.train.finetune_steps = args.finetune_steps
cfg.asf.enabled = False
cfg.eval.known_threshold = cfg.eval.unknown_threshold = 0.3
schedule = cfg.schedule

first, _ = generate_synthetic(SyntheticSceneSpec(num_images=120, seed=args.seed, classes=SHAPES))
second, _ = generate_synthetic(SyntheticSceneSpec(num_images=120, seed=args.seed + 500, classes=SHAPES, id_prefix="t2"))
test, _ = generate_synthetic(SyntheticSceneSpec(num_images=80, seed=args.seed + 1000, classes=SHAPES, id_prefix="test"))


def show(model, task):
    gt = apply_visibility(test, schedule, task, "eval")
    r = evaluate(predict(model, test, schedule, task, cfg.eval), gt, schedule, task, cfg.eval)
    u = "n/a" if r.U_recall is None else f"{r.U_recall:.3f}"
    prev = "n/a" if r.mAP_prev is None else f"{r.mAP_prev:.3f}"
    print(f"task {task}: mAP previous {prev}  current {r.mAP_curr:.3f}  U-Recall {u}")
    print("  per class:", {c: round(v, 3) for c, v in r.per_class_ap.items()})


model = build_model(cfg, len(schedule.known(1)))
train(model, apply_visibility(first, schedule, 1, "train"), {}, cfg, task=1)
show(model, 1)

store = build_exemplar_store(first, schedule.known(1), schedule.exemplar_budget, cfg.sub_seed("exemplars"))
print("exemplars per class:", {c: len(v) for c, v in store.per_class.items()})

model, store = advance_task(model, cfg, 1, second, store)
print("class head width:", model.num_classes, " exemplars per class:", {c: len(v) for c, v in store.per_class.items()})
show(model, 2)
