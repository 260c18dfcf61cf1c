"""Dataset records, the annotation file format and the synthetic scene generator.

On disk a dataset is a directory::

    annotations.json   images / annotations / categories, schema_version 1
    images/<id>.png
    aux_boxes.json     optional, see owdet.asf.write_aux_file

Boxes in ``annotations.json`` are normalized ``[cx, cy, w, h]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .asf import AuxiliaryBox, read_aux_file, write_aux_file
from .geometry import Box, InvalidBox, pairwise_iou
from .protocol import TaskSchedule, UnknownClassId, label_visibility

ANNOTATION_SCHEMA_VERSION = 1


class ParseError(ValueError):
    pass


class MissingImage(FileNotFoundError):
    pass


@dataclass
class DatasetRecord:
    image_id: str
    image: np.ndarray  # H x W x 3 uint8
    annotations: list[tuple[Box, int]] = field(default_factory=list)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([b.as_list() for b, _ in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c for _, c in self.annotations], dtype=np.int64)


# --------------------------------------------------------------------------
# annotation files


def write_dataset(directory, records: list[DatasetRecord], class_names: dict[int, str] | None = None) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for r in records:
        file_name = f"images/{r.image_id}.png"
        Image.fromarray(r.image).save(directory / file_name)
        h, w = r.image.shape[:2]
        images.append({"id": r.image_id, "file_name": file_name, "width": w, "height": h})
        for box, cls in r.annotations:
            annotations.append({"image_id": r.image_id, "category_id": int(cls), "bbox": box.as_list()})
    class_names = class_names or {}
    cats = sorted({c for r in records for _, c in r.annotations} | set(class_names))
    doc = {
        "schema_version": ANNOTATION_SCHEMA_VERSION,
        "images": images,
        "annotations": annotations,
        "categories": [{"id": c, "name": class_names.get(c, str(c))} for c in cats],
    }
    (directory / "annotations.json").write_text(json.dumps(doc, indent=1))


def read_annotations(directory) -> tuple[list[dict], dict[str, list[tuple[Box, int]]]]:
    path = Path(directory) / "annotations.json"
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ParseError(f"{path}: missing annotation file") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("schema_version") != ANNOTATION_SCHEMA_VERSION:
        raise ParseError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    images = doc.get("images", [])
    anns: dict[str, list[tuple[Box, int]]] = {im["id"]: [] for im in images}
    for a in doc.get("annotations", []):
        image_id = a.get("image_id")
        if image_id not in anns:
            raise ParseError(f"annotation refers to unknown image {image_id!r}")
        try:
            box = Box.from_sequence(a["bbox"])
        except (InvalidBox, KeyError, TypeError) as exc:
            raise ParseError(f"image {image_id!r}: malformed box {a.get('bbox')!r} ({exc})") from exc
        anns[image_id].append((box, int(a["category_id"])))
    return images, anns


def load_dataset(directory, schedule: TaskSchedule | None = None, task: int = 1, phase: str = "train", seed: int | None = None) -> list[DatasetRecord]:
    """Load a dataset directory with label visibility applied for ``task``.

    Records come in file order, or in a seeded permutation when ``seed`` is
    given.  Without a schedule annotations are returned untouched.
    """
    directory = Path(directory)
    images, anns = read_annotations(directory)
    records = []
    for im in images:
        path = directory / im["file_name"]
        if not path.exists():
            raise MissingImage(f"image {im['id']!r}: file {path} not found")
        pixels = np.asarray(Image.open(path).convert("RGB"))
        annotations = anns[im["id"]]
        if schedule is not None:
            try:
                annotations = label_visibility(annotations, schedule, task, phase)
            except UnknownClassId as exc:
                raise UnknownClassId(f"image {im['id']!r}: class {exc.args[0]} appears in no task") from None
        records.append(DatasetRecord(im["id"], pixels, annotations))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(records))
        records = [records[i] for i in order]
    return records


def load_aux(directory) -> dict[str, list[AuxiliaryBox]]:
    path = Path(directory) / "aux_boxes.json"
    return read_aux_file(path) if path.exists() else {}


def apply_visibility(records: list[DatasetRecord], schedule: TaskSchedule, task: int, phase: str) -> list[DatasetRecord]:
    return [DatasetRecord(r.image_id, r.image, label_visibility(r.annotations, schedule, task, phase)) for r in records]


# --------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("square", "disk", "triangle", "plus", "ring", "diamond", "frame", "cross")

# one saturated colour per shape; distinct hues keep classes separable
COLORS = {
    "square": (230, 60, 60),
    "disk": (60, 200, 80),
    "triangle": (70, 110, 240),
    "plus": (235, 210, 60),
    "ring": (220, 80, 220),
    "diamond": (60, 210, 220),
    "frame": (245, 150, 40),
    "cross": (200, 200, 200),
}


def shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    """Binary mask of ``shape`` drawn inside an ``h x w`` cell."""
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1  # [-1, 1]
    v = (yy + 0.5) / h * 2 - 1
    if shape == "square":
        m = np.ones((h, w), bool)
    elif shape == "disk":
        m = u**2 + v**2 <= 1.0
    elif shape == "triangle":
        m = np.abs(u) <= (v + 1) / 2
    elif shape == "plus":
        m = (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    elif shape == "ring":
        r = u**2 + v**2
        m = (r <= 1.0) & (r >= 0.3)
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "frame":
        m = (np.abs(u) >= 0.55) | (np.abs(v) >= 0.55)
    elif shape == "cross":
        m = (np.abs(u - v) <= 0.45) | (np.abs(u + v) <= 0.45)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


@dataclass
class SyntheticSceneSpec:
    """Scene vocabulary and noise model.

    ``classes`` maps class id to shape name; ``distractors`` lists class ids
    that are annotated in the data but are meant to stay unknown.  Auxiliary
    boxes are every object box (jittered by ``aux_jitter`` x size) plus
    ``aux_extra`` extra boxes per image, a ``fragment_ratio`` share of which
    are strict sub-boxes of objects and the rest background boxes.
    """

    num_images: int = 50
    canvas: int = 64
    classes: dict[int, str] = field(default_factory=lambda: {0: "square", 1: "disk", 2: "triangle", 3: "plus"})
    distractors: dict[int, str] = field(default_factory=dict)
    known_per_image: tuple[int, int] = (1, 3)
    distractors_per_image: tuple[int, int] = (0, 2)
    size_range: tuple[int, int] = (11, 22)
    max_overlap: float = 0.05
    background_level: int = 25
    noise_std: float = 8.0
    color_jitter: int = 20
    aux_jitter: float = 0.0
    aux_extra: int = 0
    fragment_ratio: float = 0.5
    seed: int = 0
    id_prefix: str = "img"

    def __post_init__(self):
        self.classes = {int(k): v for k, v in self.classes.items()}
        self.distractors = {int(k): v for k, v in self.distractors.items()}
        if set(self.classes) & set(self.distractors):
            raise ValueError("known and distractor class ids must be disjoint")
        if set(self.classes.values()) & set(self.distractors.values()):
            raise ValueError("known and distractor shapes must be disjoint")
        for name in (*self.classes.values(), *self.distractors.values()):
            if name not in SHAPES:
                raise ValueError(f"unknown shape {name!r}")
        if not 0.0 <= self.fragment_ratio <= 1.0:
            raise ValueError("fragment_ratio must lie in [0, 1]")

    @property
    def class_names(self) -> dict[int, str]:
        return {**self.classes, **self.distractors}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = {str(k): v for k, v in self.classes.items()}
        d["distractors"] = {str(k): v for k, v in self.distractors.items()}
        return d


def _place(rng, spec: SyntheticSceneSpec, placed: list[np.ndarray]):
    lo, hi = spec.size_range
    for _ in range(50):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, spec.canvas - w + 1))
        y = int(rng.integers(0, spec.canvas - h + 1))
        box = np.array([(x + w / 2) / spec.canvas, (y + h / 2) / spec.canvas, w / spec.canvas, h / spec.canvas])
        if not placed or pairwise_iou(box, np.array(placed)).max() <= spec.max_overlap:
            return x, y, w, h, box
    return None


def _render(rng, spec: SyntheticSceneSpec, objects) -> np.ndarray:
    c = spec.canvas
    img = rng.normal(spec.background_level, spec.noise_std, size=(c, c, 3))
    for shape, (x, y, w, h) in objects:
        m = shape_mask(shape, h, w)
        color = np.array(COLORS[shape]) + rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)
        patch = img[y:y + h, x:x + w]
        patch[m] = color + rng.normal(0, spec.noise_std / 2, size=(int(m.sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _jitter(rng, box: np.ndarray, amount: float) -> Box:
    if amount <= 0:
        return Box(*box)
    cx, cy, w, h = box
    cx += rng.normal(0, amount * w)
    cy += rng.normal(0, amount * h)
    w *= float(np.exp(rng.normal(0, amount)))
    h *= float(np.exp(rng.normal(0, amount)))
    return _clip_box(cx, cy, w, h)


def _clip_box(cx, cy, w, h) -> Box:
    x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
    x2, y2 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
    return Box.from_corners(x1, y1, x2, y2)


def _fragment(rng, box: np.ndarray) -> Box:
    """A strict sub-box covering 25-60% of ``box`` along each side."""
    cx, cy, w, h = box
    fw = w * rng.uniform(0.25, 0.6)
    fh = h * rng.uniform(0.25, 0.6)
    x1 = cx - w / 2 + rng.uniform(0, w - fw)
    y1 = cy - h / 2 + rng.uniform(0, h - fh)
    return Box.from_corners(x1, y1, x1 + fw, y1 + fh)


def _background_box(rng, spec: SyntheticSceneSpec, objects: np.ndarray) -> Box:
    lo, hi = spec.size_range
    best, best_iou = None, np.inf
    for _ in range(20):
        w = rng.uniform(lo, 2 * hi) / spec.canvas
        h = rng.uniform(lo, 2 * hi) / spec.canvas
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        box = np.array([cx, cy, w, h])
        worst = pairwise_iou(box, objects).max() if len(objects) else 0.0
        if worst < best_iou:
            best, best_iou = box, worst
        if worst < 0.1:
            break
    return Box(*best)


def generate_synthetic(spec: SyntheticSceneSpec) -> tuple[list[DatasetRecord], dict[str, list[AuxiliaryBox]]]:
    """Render the scenes and the matching noisy auxiliary boxes (deterministic in ``spec.seed``)."""
    rng = np.random.default_rng(spec.seed)
    known_ids = sorted(spec.classes)
    distractor_ids = sorted(spec.distractors)
    names = spec.class_names
    records, aux = [], {}
    for i in range(spec.num_images):
        n_known = int(rng.integers(spec.known_per_image[0], spec.known_per_image[1] + 1)) if known_ids else 0
        n_dist = int(rng.integers(spec.distractors_per_image[0], spec.distractors_per_image[1] + 1)) if distractor_ids else 0
        wanted = [int(rng.choice(known_ids)) for _ in range(n_known)] + [int(rng.choice(distractor_ids)) for _ in range(n_dist)]
        placed, objects, annotations = [], [], []
        for cls in wanted:
            spot = _place(rng, spec, placed)
            if spot is None:
                continue
            x, y, w, h, box = spot
            placed.append(box)
            objects.append((names[cls], (x, y, w, h)))
            annotations.append((Box(*box), cls))
        image = _render(rng, spec, objects)
        image_id = f"{spec.id_prefix}{i:05d}"
        records.append(DatasetRecord(image_id, image, annotations))

        boxes = np.array(placed).reshape(-1, 4)
        aux_boxes = [AuxiliaryBox(_jitter(rng, b, spec.aux_jitter)) for b in boxes]
        n_frag = int(round(spec.aux_extra * spec.fragment_ratio)) if len(boxes) else 0
        for k in range(spec.aux_extra):
            if k < n_frag:
                aux_boxes.append(AuxiliaryBox(_fragment(rng, boxes[int(rng.integers(len(boxes)))])))
            else:
                aux_boxes.append(AuxiliaryBox(_background_box(rng, spec, boxes)))
        aux[image_id] = aux_boxes
    return records, aux


def write_synthetic(directory, spec: SyntheticSceneSpec) -> tuple[list[DatasetRecord], dict[str, list[AuxiliaryBox]]]:
    records, aux = generate_synthetic(spec)
    directory = Path(directory)
    write_dataset(directory, records, spec.class_names)
    write_aux_file(directory / "aux_boxes.json", aux)
    (directory / "scene_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    return records, aux
