"""Desk-scale synthetic benchmark shared by the trend experiments and demos.

Four shapes are known at task 1 and four more appear only as unannotated
distractors, so they are the unknowns the detector should recover.  The
auxiliary file holds jittered copies of every object plus fragments and
background boxes, standing in for a class-agnostic proposal model.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .config import ExperimentConfig
from .data import DatasetRecord, SyntheticSceneSpec, apply_visibility, generate_synthetic
from .engine import build_model, train
from .evaluation import MetricReport, evaluate, predict
from .model import Detector

KNOWN = {0: "square", 1: "disk", 2: "triangle", 3: "plus"}
DISTRACTORS = {4: "ring", 5: "diamond", 6: "frame", 7: "cross"}

VARIANTS = ("asf", "no-asf", "raw-aux", "last-layer")


@dataclass(frozen=True)
class TrendSetting:
    train_images: int = 200
    test_images: int = 300
    aux_jitter: float = 0.05
    aux_extra: int = 8
    steps: int = 1500
    num_queries: int = 50
    lr: float = 1e-3
    # objectness weight at this scale; the pseudo weight stays at a tenth of it
    obj_weight: float = 0.02
    known_threshold: float = 0.3
    unknown_threshold: float = 0.3


def trend_data(seed: int, setting: TrendSetting = TrendSetting()):
    """``(train_records, aux, test_records)`` with all labels still attached."""
    kw = dict(classes=KNOWN, distractors=DISTRACTORS, distractors_per_image=(1, 2))
    train_records, aux = generate_synthetic(
        SyntheticSceneSpec(
            num_images=setting.train_images, seed=seed, aux_jitter=setting.aux_jitter, aux_extra=setting.aux_extra, **kw
        )
    )
    test_records, _ = generate_synthetic(
        SyntheticSceneSpec(num_images=setting.test_images, seed=seed + 1000, id_prefix="test", **kw)
    )
    return train_records, aux, test_records


def trend_config(seed: int, variant: str = "asf", setting: TrendSetting = TrendSetting()) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = ExperimentConfig(seed=seed)
    cfg.model.num_queries = setting.num_queries
    cfg.train.lr = setting.lr
    cfg.train.steps = setting.steps
    cfg.loss = replace(cfg.loss, obj=setting.obj_weight, obj_pse=setting.obj_weight / 10)
    cfg.eval.known_threshold = setting.known_threshold
    cfg.eval.unknown_threshold = setting.unknown_threshold
    if variant == "no-asf":
        cfg.asf.enabled = False
    elif variant == "raw-aux":
        cfg.asf.filter = False
        cfg.asf.soft_weights = False
    elif variant == "last-layer":
        cfg.model.objectness_layer_index = cfg.model.num_decoder_layers
    return cfg


def train_variant(
    seed: int, variant: str = "asf", setting: TrendSetting = TrendSetting(), data=None, callback=None
) -> tuple[Detector, ExperimentConfig]:
    train_records, aux, _ = data or trend_data(seed, setting)
    cfg = trend_config(seed, variant, setting)
    model = build_model(cfg, len(KNOWN))
    visible = apply_visibility(train_records, cfg.schedule, 1, "train")
    train(model, visible, aux, cfg, callback=callback)
    return model, cfg


def evaluate_variant(model: Detector, cfg: ExperimentConfig, test_records: list[DatasetRecord]) -> MetricReport:
    gt = apply_visibility(test_records, cfg.schedule, 1, "eval")
    detections = predict(model, test_records, cfg.schedule, 1, cfg.eval)
    return evaluate(detections, gt, cfg.schedule, 1, cfg.eval)


def run_variant(seed: int, variant: str = "asf", setting: TrendSetting = TrendSetting()) -> MetricReport:
    """Train one variant from scratch and score it on the held-out split."""
    data = trend_data(seed, setting)
    model, cfg = train_variant(seed, variant, setting, data)
    return evaluate_variant(model, cfg, data[2])
