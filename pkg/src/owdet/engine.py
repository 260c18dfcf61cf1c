"""Training step, training loop, task advancement and checkpoints."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .asf import AsfConfig, AuxiliaryBox, pseudo_labels_for_image
from .config import ExperimentConfig
from .data import DatasetRecord, apply_visibility
from .evaluation import images_to_tensor
from .losses import (
    LossReport,
    aux_objectness_loss,
    aux_regression_loss,
    detection_losses,
    num_boxes,
    objectness_loss,
    total_loss,
)
from .matching import MatchResult, match_known, match_pseudo
from .model import Detector, LayerOutputs
from .protocol import ExemplarStore, ScheduleExhausted, TaskSchedule

CHECKPOINT_FORMAT = "owdet-checkpoint/1"


def make_targets(records: list[DatasetRecord], schedule: TaskSchedule, dtype=torch.float32) -> list[dict]:
    """Tensor targets with labels mapped to class-head columns."""
    targets = []
    for r in records:
        labels = [schedule.column(c) for _, c in r.annotations]
        targets.append(
            {
                "boxes": torch.tensor(r.boxes, dtype=dtype).reshape(-1, 4),
                "labels": torch.tensor(labels, dtype=torch.long),
            }
        )
    return targets


def assign(outputs: LayerOutputs, targets, records, aux: dict, asf: AsfConfig):
    """Known matching on every supervised layer plus pseudo matching on the last.

    Returns ``(matches_per_layer, final_matches, pseudo_boxes)`` where
    ``pseudo_boxes[b]`` lists the pseudo-label boxes that the
    ``pseudo_matched`` indices of image ``b`` refer to.
    """
    matches_per_layer: dict[int, list[MatchResult]] = {}
    for layer, logits in outputs.logits.items():
        matches_per_layer[layer] = [
            match_known(logits[b], outputs.boxes[layer][b], t["boxes"], t["labels"]) for b, t in enumerate(targets)
        ]
    final = matches_per_layer[outputs.num_layers]
    p_obj = outputs.p_obj.detach().double().numpy()
    pred_boxes = outputs.pred_boxes.detach().double().numpy()
    pseudo_boxes = []
    for b, r in enumerate(records):
        boxes: list[list[float]] = []
        if asf.enabled and aux.get(r.image_id):
            known_gt = [box for box, _ in r.annotations]
            labels = pseudo_labels_for_image(aux[r.image_id], known_gt, p_obj[b], pred_boxes[b], asf)
            boxes = [lbl.box.as_list() for lbl in labels]
            if boxes:
                final[b].pseudo_matched = match_pseudo(final[b].unmatched, np.array(boxes), p_obj[b], pred_boxes[b], asf.alpha)
        pseudo_boxes.append(boxes)
    return matches_per_layer, final, pseudo_boxes


def compute_losses(outputs: LayerOutputs, targets, matches_per_layer, final, pseudo_boxes, cfg: ExperimentConfig):
    """All loss terms as a dict of scalar tensors."""
    norm = num_boxes(targets)
    cls, l1, giou = detection_losses(outputs, targets, matches_per_layer)
    dim = outputs.objectness_embeddings.shape[-1]
    temp = cfg.asf.temperature
    soft = cfg.asf.soft_weights
    return {
        "cls": cls,
        "l1": l1,
        "giou": giou,
        "obj": objectness_loss(outputs.obj_dist_sq, final, norm),
        "aux_obj": aux_objectness_loss(outputs.obj_dist_sq, final, temp, dim, soft),
        "aux_reg": aux_regression_loss(
            outputs.pred_boxes,
            outputs.obj_dist_sq,
            final,
            [torch.tensor(b, dtype=outputs.pred_boxes.dtype).reshape(-1, 4) for b in pseudo_boxes],
            temp,
            dim,
            soft,
        ),
    }


def train_step(model: Detector, optimizer, records, aux, cfg: ExperimentConfig, schedule: TaskSchedule, step: int | None = None) -> LossReport:
    model.train()
    images = images_to_tensor([r.image for r in records])
    targets = make_targets(records, schedule)
    outputs = model(images)
    matches_per_layer, final, pseudo_boxes = assign(outputs, targets, records, aux, cfg.asf)
    terms = compute_losses(outputs, targets, matches_per_layer, final, pseudo_boxes, cfg)
    loss, report = total_loss(terms, cfg.loss, step)
    optimizer.zero_grad()
    loss.backward()
    if cfg.train.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
    optimizer.step()
    report.extras["num_pseudo"] = sum(len(m.pseudo_matched) for m in final)
    return report


def build_model(cfg: ExperimentConfig, num_classes: int) -> Detector:
    torch.manual_seed(cfg.sub_seed("model"))
    cfg.model.num_known_classes = num_classes
    return Detector(cfg.model)


def make_optimizer(model, lr: float, weight_decay: float):
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def batch_order(n: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Epoch-wise seeded permutations cut into batches, ``steps`` batches in total."""
    rng = np.random.default_rng(seed)
    batches: list[np.ndarray] = []
    while len(batches) < steps:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = perm[start:start + batch_size]
            if len(chunk) < batch_size and n >= batch_size:
                chunk = np.concatenate([chunk, perm[: batch_size - len(chunk)]])
            batches.append(chunk)
            if len(batches) == steps:
                break
    return batches


def train(
    model: Detector,
    records: list[DatasetRecord],
    aux: dict[str, list[AuxiliaryBox]],
    cfg: ExperimentConfig,
    task: int = 1,
    steps: int | None = None,
    lr: float | None = None,
    log_path=None,
    seed_name: str = "data",
    callback: Callable[[int, LossReport], None] | None = None,
) -> list[LossReport]:
    """Run ``steps`` optimizer steps over ``records`` (already visibility-filtered)."""
    schedule = cfg.schedule
    steps = cfg.train.steps if steps is None else steps
    lr = cfg.train.lr if lr is None else lr
    num_known = len(schedule.known(task))
    if model.num_classes != num_known:
        model.widen_class_head(num_known)
    optimizer = make_optimizer(model, lr, cfg.train.weight_decay)
    drop = cfg.train.lr_drop_step
    reports = []
    fh = open(log_path, "a") if log_path else None
    try:
        for step, idx in enumerate(batch_order(len(records), steps, cfg.train.batch_size, cfg.sub_seed(seed_name))):
            if drop is not None and step == drop:
                for group in optimizer.param_groups:
                    group["lr"] = lr * 0.1
            report = train_step(model, optimizer, [records[i] for i in idx], aux, cfg, schedule, step)
            reports.append(report)
            if fh:
                fh.write(report.to_json() + "\n")
            if callback:
                callback(step, report)
    finally:
        if fh:
            fh.close()
    return reports


def build_exemplar_store(records: list[DatasetRecord], classes: list[int], budget: int, seed: int, store: ExemplarStore | None = None) -> ExemplarStore:
    store = store or ExemplarStore(budget)
    for c in classes:
        store.add_class(records, c, seed)
    return store


def advance_task(
    model: Detector,
    cfg: ExperimentConfig,
    task: int,
    new_records: list[DatasetRecord],
    store: ExemplarStore,
    aux: dict | None = None,
    log_path=None,
) -> tuple[Detector, ExemplarStore]:
    """Move a model trained on task ``task`` to task ``task + 1``.

    Widens the class heads, trains on the new task's data, then fine-tunes on
    the exemplar store plus a class-balanced sample of the new data at the
    reduced learning rate.  ``new_records`` and the store hold unfiltered
    annotations; visibility for the next task is applied here.
    """
    schedule = cfg.schedule
    nxt = task + 1
    if nxt > schedule.num_tasks:
        raise ScheduleExhausted(f"no task after {task}")
    aux = aux or {}
    torch.manual_seed(cfg.sub_seed(f"widen-task{nxt}"))
    model.widen_class_head(len(schedule.known(nxt)))
    visible = apply_visibility(new_records, schedule, nxt, "train")
    train(model, visible, aux, cfg, task=nxt, log_path=log_path, seed_name=f"data-task{nxt}")
    store = build_exemplar_store(new_records, schedule.current(nxt), store.budget, cfg.sub_seed("exemplars"), store)
    if cfg.train.finetune_steps > 0:
        train(
            model,
            apply_visibility(store.records(), schedule, nxt, "train"),
            aux,
            cfg,
            task=nxt,
            steps=cfg.train.finetune_steps,
            lr=cfg.train.lr * schedule.finetune_lr_factor,
            log_path=log_path,
            seed_name=f"finetune-task{nxt}",
        )
    return model, store


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Detector, cfg: ExperimentConfig, task: int, store: ExemplarStore | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "task": task,
        "exemplars": {str(c): [r.image_id for r in rs] for c, rs in store.per_class.items()} if store else {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[Detector, ExperimentConfig, int, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    model_cfg = type(cfg.model)(**payload["model_config"])
    cfg.model = model_cfg
    model = Detector(model_cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload["task"], payload["exemplars"]


def exemplar_store_from_ids(ids: dict, records: list[DatasetRecord], budget: int) -> ExemplarStore:
    by_id = {r.image_id: r for r in records}
    store = ExemplarStore(budget)
    for c, image_ids in ids.items():
        store.per_class[int(c)] = [by_id[i] for i in image_ids if i in by_id]
    return store


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
