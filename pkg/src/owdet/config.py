"""Experiment configuration: one JSON document holding every knob.

Random streams fan out from ``seed`` through named sub-seeds so that data
order, parameter initialization and exemplar selection are independent.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .asf import AsfConfig
from .losses import LossWeights
from .model import DetectorConfig
from .protocol import TaskSchedule


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    lr_drop_step: int | None = None
    finetune_steps: int = 300


@dataclass
class EvalConfig:
    gamma: float = 0.6
    score_mode: str = "geometric"
    top_k: int = 100
    known_threshold: float = 0.05
    unknown_threshold: float = 0.05
    iou_threshold: float = 0.5
    wi_recall_level: float = 0.8


def _default_schedule() -> TaskSchedule:
    return TaskSchedule(tasks=[[0, 1, 2, 3], [4, 5, 6, 7]])


@dataclass
class ExperimentConfig:
    model: DetectorConfig = field(default_factory=DetectorConfig)
    asf: AsfConfig = field(default_factory=AsfConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schedule: TaskSchedule = field(default_factory=_default_schedule)
    seed: int = 0

    def sub_seed(self, name: str) -> int:
        return (self.seed * 1_000_003 + zlib.crc32(name.encode())) % (2**31)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "asf": asdict(self.asf),
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "eval": asdict(self.eval),
            "schedule": self.schedule.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        def build(kind, values):
            names = {f.name for f in fields(kind)}
            extra = set(values) - names
            if extra:
                raise ValueError(f"unknown {kind.__name__} keys: {sorted(extra)}")
            return kind(**values)

        return cls(
            model=build(DetectorConfig, d.get("model", {})),
            asf=build(AsfConfig, d.get("asf", {})),
            loss=build(LossWeights, d.get("loss", {})),
            train=build(TrainConfig, d.get("train", {})),
            eval=build(EvalConfig, d.get("eval", {})),
            schedule=TaskSchedule.from_dict(d["schedule"]) if "schedule" in d else _default_schedule(),
            seed=int(d.get("seed", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
