"""Incremental task bookkeeping: known/unknown class sets, label visibility, exemplars."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNKNOWN = -1


class UnknownClassId(KeyError):
    pass


class ScheduleExhausted(IndexError):
    pass


@dataclass
class TaskSchedule:
    """Ordered class introductions.

    ``tasks[t - 1]`` lists the class ids introduced at task ``t`` (1-based).
    ``unknown_classes`` are annotated in the data but never become known.
    """

    tasks: list[list[int]]
    unknown_classes: list[int] = field(default_factory=list)
    exemplar_budget: int = 50
    finetune_lr_factor: float = 0.1
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tasks = [list(map(int, t)) for t in self.tasks]
        self.unknown_classes = [int(c) for c in self.unknown_classes]
        self.class_names = {int(k): v for k, v in self.class_names.items()}
        seen: set[int] = set()
        for t in self.tasks:
            if seen & set(t) or len(set(t)) != len(t):
                raise ValueError("class sets of different tasks must be disjoint")
            seen |= set(t)
        if seen & set(self.unknown_classes):
            raise ValueError("unknown-only classes overlap task classes")
        if self.exemplar_budget <= 0:
            raise ValueError("exemplar_budget must be positive")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def vocabulary(self) -> list[int]:
        return [c for t in self.tasks for c in t] + list(self.unknown_classes)

    def _check_task(self, t: int) -> None:
        if not 1 <= t <= self.num_tasks:
            raise ScheduleExhausted(f"task {t} outside 1..{self.num_tasks}")

    def known(self, t: int) -> list[int]:
        """Known classes at task ``t`` in introduction order (= class-head column order)."""
        self._check_task(t)
        return [c for task in self.tasks[:t] for c in task]

    def previously_known(self, t: int) -> list[int]:
        return self.known(t - 1) if t > 1 else []

    def current(self, t: int) -> list[int]:
        self._check_task(t)
        return list(self.tasks[t - 1])

    def unknown(self, t: int) -> list[int]:
        known = set(self.known(t))
        return [c for c in self.vocabulary if c not in known]

    def column(self, class_id: int) -> int:
        order = [c for task in self.tasks for c in task]
        try:
            return order.index(class_id)
        except ValueError:
            raise UnknownClassId(class_id) from None

    def class_of_column(self, column: int) -> int:
        return [c for task in self.tasks for c in task][column]

    def to_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "unknown_classes": self.unknown_classes,
            "exemplar_budget": self.exemplar_budget,
            "finetune_lr_factor": self.finetune_lr_factor,
            "class_names": {str(k): v for k, v in self.class_names.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSchedule":
        return cls(
            tasks=d["tasks"],
            unknown_classes=d.get("unknown_classes", []),
            exemplar_budget=d.get("exemplar_budget", 50),
            finetune_lr_factor=d.get("finetune_lr_factor", 0.1),
            class_names=d.get("class_names", {}),
        )


def label_visibility(annotations, schedule: TaskSchedule, t: int, phase: str):
    """Filter ``(box, class_id)`` annotations for task ``t``.

    ``train`` drops everything outside the known set; ``eval`` keeps all and
    relabels non-known classes as :data:`UNKNOWN`.
    """
    if phase not in ("train", "eval"):
        raise ValueError(f"phase must be 'train' or 'eval', got {phase!r}")
    vocab = set(schedule.vocabulary)
    known = set(schedule.known(t))
    out = []
    for box, cls in annotations:
        if cls not in vocab:
            raise UnknownClassId(cls)
        if cls in known:
            out.append((box, cls))
        elif phase == "eval":
            out.append((box, UNKNOWN))
    return out


def select_exemplars(records, class_id: int, budget: int, seed: int = 0) -> list:
    """Uniformly sample up to ``budget`` records containing ``class_id``."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    pool = [r for r in records if any(c == class_id for _, c in r.annotations)]
    if len(pool) <= budget:
        return pool
    rng = np.random.default_rng([seed, class_id])
    idx = np.sort(rng.choice(len(pool), size=budget, replace=False))
    return [pool[i] for i in idx]


@dataclass
class ExemplarStore:
    budget: int = 50
    per_class: dict[int, list] = field(default_factory=dict)

    def add_class(self, records, class_id: int, seed: int = 0) -> None:
        self.per_class[class_id] = select_exemplars(records, class_id, self.budget, seed)

    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def records(self) -> list:
        """Distinct exemplar records, in class then selection order."""
        seen, out = set(), []
        for cls in sorted(self.per_class):
            for r in self.per_class[cls]:
                if r.image_id not in seen:
                    seen.add(r.image_id)
                    out.append(r)
        return out
