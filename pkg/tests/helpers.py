"""Shared fixtures for the gradient checks: a tiny float64 detector with frozen matchings."""

import numpy as np
import torch

from owdet.engine import make_targets
from owdet.data import DatasetRecord
from owdet.geometry import Box
from owdet.losses import (
    aux_objectness_loss,
    aux_regression_loss,
    detection_losses,
    num_boxes,
    objectness_loss,
    soft_weights,
)
from owdet.matching import match_known
from owdet.model import Detector, DetectorConfig
from owdet.protocol import TaskSchedule

TEMPERATURE = 1.3


def tiny_problem(seed=0):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(
        num_queries=4, embed_dim=8, num_heads=2, ffn_dim=16, num_decoder_layers=3,
        num_known_classes=2, image_size=16, backbone_channels=(4, 8), obj_eps=1e-3, detach_refs=False,
    )
    model = Detector(cfg).double().train()
    # nonzero box-head outputs so box gradients reach every head layer
    with torch.no_grad():
        for head in model.box_heads:
            head[-1].weight.normal_(0, 0.1)
    images = torch.tensor(rng.normal(size=(3, 3, 16, 16)))
    schedule = TaskSchedule([[0, 1]])
    records = []
    for i in range(3):
        anns = [(Box(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.3, 2)), int(rng.integers(2))) for _ in range(2)]
        records.append(DatasetRecord(f"t{i}", np.zeros((16, 16, 3), np.uint8), anns))
    targets = make_targets(records, schedule, dtype=torch.float64)
    out = model(images)
    matches = {
        layer: [match_known(out.logits[layer][b], out.boxes[layer][b], t["boxes"], t["labels"]) for b, t in enumerate(targets)]
        for layer in out.logits
    }
    final = matches[out.num_layers]
    pseudo_boxes = []
    for b, m in enumerate(final):
        m.pseudo_matched = [(p, k) for k, p in enumerate(m.unmatched[:2])]
        boxes = rng.uniform(0.3, 0.7, (len(m.pseudo_matched), 4))
        boxes[:, 2:] = rng.uniform(0.1, 0.3, (len(boxes), 2))
        pseudo_boxes.append(torch.tensor(boxes))
    return model, images, targets, matches, final, pseudo_boxes


def term_functions(model, images, targets, matches, final, pseudo_boxes):
    """Each term as a function of the parameters, soft weights frozen at the current point.

    Returns ``(analytic, frozen)``: ``analytic`` uses the library losses,
    ``frozen`` reimplements the pseudo terms with constant weights, which is
    the function whose derivative the library's detached weights produce.
    """
    norm = num_boxes(targets)
    with torch.no_grad():
        d0 = model(images).obj_dist_sq
    pm = [(b, p) for b, m in enumerate(final) for p, _ in m.pseudo_matched]
    bi, pi = [b for b, _ in pm], [p for _, p in pm]
    w0 = soft_weights(d0[bi, pi], TEMPERATURE, d0.new_tensor(8).item())
    tgt = torch.cat(pseudo_boxes)

    def analytic(name):
        def f():
            out = model(images)
            cls, l1, giou = detection_losses(out, targets, matches)
            if name == "cls":
                return cls
            if name == "reg":
                return l1 + giou
            if name == "obj":
                return objectness_loss(out.obj_dist_sq, final, norm)
            if name == "aux_obj":
                return aux_objectness_loss(out.obj_dist_sq, final, TEMPERATURE, 8)
            return aux_regression_loss(out.pred_boxes, out.obj_dist_sq, final, pseudo_boxes, TEMPERATURE, 8)
        return f

    def frozen(name):
        def f():
            out = model(images)
            if name == "aux_obj":
                return (w0 * out.obj_dist_sq[bi, pi]).sum() / len(pm)
            if name == "aux_reg":
                return (w0 * (out.pred_boxes[bi, pi] - tgt).abs().sum(-1)).sum() / len(pm)
            return analytic(name)()
        return f

    return analytic, frozen


TERM_NAMES = ("cls", "reg", "obj", "aux_obj", "aux_reg")


def gradient_check(model, analytic, frozen, seed=0, h=1e-6, floor=1e-6):
    """Worst relative error between analytic and central-difference directional derivatives.

    One random direction per parameter tensor plus one over all parameters.
    Errors are relative to ``max(|analytic|, |numeric|, floor)``; the floor
    absorbs difference noise along directions the term does not depend on.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss = analytic()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    gen = torch.Generator().manual_seed(seed)
    directions = []
    for i, p in enumerate(params):
        v = [torch.zeros_like(q) for q in params]
        v[i] = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        directions.append(v)
    directions.append([torch.randn(q.shape, generator=gen, dtype=q.dtype) for q in params])
    worst = 0.0
    checked = 0
    for v in directions:
        ana = float(sum((g * d).sum() for g, d in zip(grads, v)))
        with torch.no_grad():
            for p, d in zip(params, v):
                p.add_(h * d)
            up = float(frozen())
            for p, d in zip(params, v):
                p.sub_(2 * h * d)
            down = float(frozen())
            for p, d in zip(params, v):
                p.add_(h * d)
        num = (up - down) / (2 * h)
        scale = max(abs(ana), abs(num), floor)
        checked += scale > floor
        worst = max(worst, abs(ana - num) / scale)
    return worst, checked


def scene_to_package(dets, gts):
    """Oracle scene dicts -> (Detection list, record-like GT list)."""
    from types import SimpleNamespace

    from owdet.evaluation import Detection

    detections = [Detection(d["image"], np.array(d["box"]), d["label"], d["score"], d["query"]) for d in dets]
    images = sorted({g["image"] for g in gts} | {d["image"] for d in dets})
    records = [
        SimpleNamespace(image_id=im, annotations=[(Box(*g["box"]), g["label"]) for g in gts if g["image"] == im])
        for im in images
    ]
    return detections, records
