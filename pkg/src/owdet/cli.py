"""Command-line entry point: ``owdet {synth,config,train,eval,pseudo-label,advance}``.

Every failure exits nonzero after printing exactly one line of the form
``owdet-error: <category>: <message>`` to stderr, where ``<category>`` is one
of ``usage``, ``config``, ``data``, ``checkpoint`` or ``schedule``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .asf import AuxFileError, pseudo_labels_for_image, read_aux_file
from .config import ExperimentConfig
from .data import MissingImage, ParseError, SyntheticSceneSpec, load_dataset, write_synthetic
from .engine import (
    advance_task,
    build_exemplar_store,
    build_model,
    exemplar_store_from_ids,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .evaluation import evaluate, images_to_tensor, predict, write_detections
from .matching import match_pseudo
from .protocol import ScheduleExhausted, UnknownClassId


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(path)
    except FileNotFoundError as exc:
        raise CliError("config", f"{path}: not found") from exc
    except (json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
        raise CliError("config", f"{path}: {exc}") from exc


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError("checkpoint", f"{path}: not found") from exc
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        raise CliError("checkpoint", f"{path}: {exc}") from exc


def _read_aux(path) -> dict:
    if path is None:
        return {}
    try:
        return read_aux_file(path)
    except FileNotFoundError as exc:
        raise CliError("data", f"{path}: not found") from exc
    except AuxFileError as exc:
        raise CliError("data", str(exc)) from exc


def _load_data(path, schedule=None, task=1, phase="train"):
    return load_dataset(path, schedule, task, phase)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    values = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.num_images is not None:
        values["num_images"] = args.num_images
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        spec = SyntheticSceneSpec(**values)
    except (TypeError, ValueError) as exc:
        raise CliError("config", f"scene spec: {exc}") from exc
    records, aux = write_synthetic(args.out, spec)
    print(json.dumps({"images": len(records), "objects": sum(len(r.annotations) for r in records),
                      "aux_boxes": sum(len(v) for v in aux.values()), "out": str(args.out)}))


def cmd_config(args) -> None:
    ExperimentConfig().save(args.out)
    print(args.out)


def cmd_train(args) -> None:
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg.train.steps = args.steps
    schedule = cfg.schedule
    raw = _load_data(args.data)
    records = _load_data(args.data, schedule, args.task, "train")
    aux = _read_aux(args.aux)
    if args.aux is None:
        cfg.asf.enabled = False
    model = build_model(cfg, len(schedule.known(args.task)))
    if args.log:
        Path(args.log).write_text("")
    train(model, records, aux, cfg, task=args.task, log_path=args.log)
    store = build_exemplar_store(raw, schedule.known(args.task), schedule.exemplar_budget, cfg.sub_seed("exemplars"))
    save_checkpoint(args.out, model, cfg, args.task, store)
    print(args.out)


def cmd_eval(args) -> None:
    model, cfg, task, _ = _load_checkpoint(args.checkpoint)
    records = _load_data(args.data, cfg.schedule, task, "eval")
    detections = predict(model, records, cfg.schedule, task, cfg.eval)
    report = evaluate(detections, records, cfg.schedule, task, cfg.eval)
    Path(args.out).write_text(report.to_json() + "\n")
    if args.detections:
        write_detections(args.detections, detections)
    print(report.to_json())


@torch.no_grad()
def cmd_pseudo_label(args) -> None:
    model, cfg, task, _ = _load_checkpoint(args.checkpoint)
    asf = cfg.asf
    asf.enabled = True
    if args.threshold is not None:
        asf.threshold = args.threshold
    if args.alpha is not None:
        asf.alpha = args.alpha
    records = _load_data(args.data, cfg.schedule, task, "train")
    aux = _read_aux(args.aux)
    model.eval()
    out = []
    for start in range(0, len(records), 16):
        chunk = records[start:start + 16]
        res = model(images_to_tensor([r.image for r in chunk]))
        p_obj = res.p_obj.double().numpy()
        boxes = res.pred_boxes.double().numpy()
        for i, r in enumerate(chunk):
            labels = pseudo_labels_for_image(aux.get(r.image_id, []), [b for b, _ in r.annotations], p_obj[i], boxes[i], asf)
            pairs = match_pseudo(range(len(boxes[i])), np.array([lbl.box.as_list() for lbl in labels]).reshape(-1, 4), p_obj[i], boxes[i], asf.alpha)
            assigned = {k: p for p, k in pairs}
            out.append({
                "image_id": r.image_id,
                "pseudo_labels": [
                    {"box": lbl.box.as_list(), "cost": lbl.cost, "best_prediction": lbl.prediction, "matched_prediction": assigned.get(k)}
                    for k, lbl in enumerate(labels)
                ],
            })
    doc = {"alpha": asf.alpha, "threshold": asf.threshold, "images": out}
    Path(args.out).write_text(json.dumps(doc, indent=1))
    print(json.dumps({"images": len(out), "pseudo_labels": sum(len(o["pseudo_labels"]) for o in out)}))


def cmd_advance(args) -> None:
    model, cfg, task, exemplar_ids = _load_checkpoint(args.checkpoint)
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.finetune_steps is not None:
        cfg.train.finetune_steps = args.finetune_steps
    schedule = cfg.schedule
    if task + 1 > schedule.num_tasks:
        raise ScheduleExhausted(f"checkpoint is at task {task}, the schedule has {schedule.num_tasks}")
    previous = _load_data(args.prev_data)
    store = exemplar_store_from_ids(exemplar_ids, previous, schedule.exemplar_budget)
    if not store.per_class:
        store = build_exemplar_store(previous, schedule.known(task), schedule.exemplar_budget, cfg.sub_seed("exemplars"))
    new = _load_data(args.data)
    aux = _read_aux(args.aux)
    if args.aux is None:
        cfg.asf.enabled = False
    if args.log:
        Path(args.log).write_text("")
    model.train()
    model, store = advance_task(model, cfg, task, new, store, aux, args.log)
    save_checkpoint(args.out, model, cfg, task + 1, store)
    print(args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="owdet", description="Open-world detector with decoupled objectness and auxiliary supervision.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic dataset and its noisy auxiliary boxes")
    s.add_argument("--spec", help="JSON file with SyntheticSceneSpec fields")
    s.add_argument("--num-images", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("config", help="write the default experiment config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_config)

    s = sub.add_parser("train", help="train on one task")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aux", help="auxiliary-box file; without it the auxiliary losses are off")
    s.add_argument("--task", type=int, default=1)
    s.add_argument("--steps", type=int)
    s.add_argument("--log", help="JSON-lines training log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="open-world metrics of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--detections", help="optional JSON-lines detection dump")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pseudo-label", help="dump filtered pseudo labels with their costs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--aux", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("advance", help="move a checkpoint to the next task")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prev-data", required=True, help="dataset of the task the checkpoint was trained on")
    s.add_argument("--data", required=True, help="dataset of the next task")
    s.add_argument("--aux")
    s.add_argument("--steps", type=int)
    s.add_argument("--finetune-steps", type=int)
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_advance)
    return p


def _categorize(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, (ScheduleExhausted, UnknownClassId)):
        return "schedule"
    if isinstance(exc, (ParseError, MissingImage, AuxFileError, FileNotFoundError, json.JSONDecodeError)):
        return "data"
    return "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except Exception as exc:  # one line, one category, nonzero exit
        message = str(exc).replace("\n", " ")
        print(f"owdet-error: {_categorize(exc)}: {message}", file=sys.stderr)
        return 2 if _categorize(exc) == "usage" else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
