"""Synthetic scenes of deformable multi-part objects.

Every class is built from the same few primitives (disc, horizontal bar,
vertical bar) placed at class-specific positions inside a square object
box.  Each part jitters around its nominal spot with a per-class,
per-axis amplitude, so classes share visual patterns but differ in
geometry and in how their parts move.  The background carries a grating
whose orientation is the scene "theme", plus a few stray primitives that
belong to no object; themes co-occur with classes,
which is what the context stage exploits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tensor import load_tensor, save_tensor
from .boxes import BoundingBox, iou

log = logging.getLogger(__name__)


class SpecError(ValueError):
    """Dataset parameters that cannot be honoured."""


# (primitive, row, col) in a 16x16 object frame, plus (jitter_y, jitter_x) weights
CLASS_TEMPLATES = [
    ([("disc", 4, 4), ("disc", 11, 11)], (0.5, 1.0)),
    ([("disc", 4, 11), ("disc", 11, 4)], (1.0, 0.5)),
    ([("disc", 4, 8), ("hbar", 11, 8)], (1.0, 0.5)),
    ([("hbar", 4, 8), ("disc", 11, 8)], (0.5, 1.0)),
    ([("vbar", 8, 4), ("disc", 8, 11)], (1.0, 0.5)),
    ([("disc", 8, 4), ("vbar", 8, 11)], (0.5, 1.0)),
    ([("disc", 4, 4), ("disc", 4, 11), ("hbar", 12, 8)], (0.5, 1.0)),
    ([("vbar", 8, 8), ("disc", 3, 3)], (1.0, 1.0)),
]
OBJECT_SIZE = 16


@dataclass
class DatasetSpec:
    classes: int = 4
    train_scenes: int = 200
    val_scenes: int = 100
    image_size: int = 40
    object_size: int = OBJECT_SIZE
    deformation: float = 3.0
    theme_affinity: float = 0.8
    two_object_prob: float = 0.5
    distractors: int = 2
    grating_amplitude: float = 0.15
    noise: float = 0.05
    seed: int = 0


@dataclass
class SyntheticScene:
    image: np.ndarray  # [1, H, W]
    objects: list = field(default_factory=list)  # [(class_id, BoundingBox)]
    theme: int = 0

    @property
    def gt_boxes(self) -> np.ndarray:
        return np.array([b.as_list() for _, b in self.objects], dtype=np.int64).reshape(-1, 4)

    @property
    def gt_classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=np.int64)


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list
    val: list

    @property
    def val1(self):
        return self.val[: len(self.val) // 2]

    @property
    def val2(self):
        return self.val[len(self.val) // 2:]


def _primitive(kind: str, size: int) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    if kind == "disc":
        yy, xx = np.meshgrid(r, r, indexing="ij")
        return (yy ** 2 + xx ** 2 <= 2.6 ** 2).astype(float)
    if kind == "hbar":
        return ((np.abs(r)[:, None] <= 1.0) & (np.abs(r)[None, :] <= 3.5)).astype(float)
    if kind == "vbar":
        return ((np.abs(r)[:, None] <= 3.5) & (np.abs(r)[None, :] <= 1.0)).astype(float)
    raise SpecError(f"unknown primitive {kind!r}")


def render_object(class_id: int, size: int, deformation: float, rng) -> np.ndarray:
    """Object patch ``[size, size]`` with each part displaced by integer jitter."""
    parts, (wy, wx) = CLASS_TEMPLATES[class_id]
    patch = np.zeros((size, size))
    scale = size / OBJECT_SIZE
    span = 8
    for kind, r, c in parts:
        amp_y, amp_x = int(round(deformation * wy)), int(round(deformation * wx))
        dy = int(rng.integers(-amp_y, amp_y + 1)) if amp_y else 0
        dx = int(rng.integers(-amp_x, amp_x + 1)) if amp_x else 0
        cy, cx = int(round(r * scale)) + dy, int(round(c * scale)) + dx
        prim = _primitive(kind, span)
        y0, x0 = cy - span // 2, cx - span // 2
        ys, xs = slice(max(y0, 0), min(y0 + span, size)), slice(max(x0, 0), min(x0 + span, size))
        sub = prim[ys.start - y0: ys.stop - y0, xs.start - x0: xs.stop - x0]
        patch[ys, xs] = np.maximum(patch[ys, xs], sub)
    return patch


def _background(theme: int, themes: int, size: int, spec: DatasetSpec, rng) -> np.ndarray:
    angle = np.pi * theme / themes
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    wave = np.sin(2 * np.pi / 6.0 * (np.cos(angle) * xx + np.sin(angle) * yy))
    return spec.grating_amplitude * wave + spec.noise * rng.normal(size=(size, size))


def _place(size, obj, existing, rng):
    for _ in range(100):
        x, y = (int(v) for v in rng.integers(0, size - obj + 1, size=2))
        box = BoundingBox(x, y, obj, obj)
        if all(iou(box.as_list(), b.as_list()) == 0.0 for b in existing):
            return box
    return None


def _scenes(n: int, spec: DatasetSpec, rng) -> list:
    K, size, obj = spec.classes, spec.image_size, spec.object_size
    counts = [2 if rng.random() < spec.two_object_prob else 1 for _ in range(n)]
    pool = np.arange(sum(counts)) % K
    rng.shuffle(pool)
    scenes, k = [], 0
    for cnt in counts:
        classes = [int(c) for c in pool[k:k + cnt]]
        k += cnt
        theme = classes[0] if rng.random() < spec.theme_affinity else int(rng.integers(K))
        image = _background(theme, K, size, spec, rng)
        for _ in range(int(rng.integers(0, spec.distractors + 1))):
            kind = ("disc", "hbar", "vbar")[int(rng.integers(3))]
            y, x = (int(v) for v in rng.integers(0, size - 8 + 1, size=2))
            image[y:y + 8, x:x + 8] = np.maximum(image[y:y + 8, x:x + 8], _primitive(kind, 8))
        objects = []
        for c in classes:
            box = _place(size, obj, [b for _, b in objects], rng)
            if box is None:
                continue
            patch = render_object(c, obj, spec.deformation, rng)
            region = image[box.y:box.y + obj, box.x:box.x + obj]
            image[box.y:box.y + obj, box.x:box.x + obj] = np.where(patch > 0, patch, region)
            objects.append((c, box))
        scenes.append(SyntheticScene(image[None].copy(), objects, theme))
    return scenes


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic train/val scenes for ``spec``."""
    if spec.classes < 2:
        raise SpecError("need at least two classes")
    if spec.classes > len(CLASS_TEMPLATES):
        raise SpecError(f"at most {len(CLASS_TEMPLATES)} classes are defined")
    if spec.train_scenes < 1 or spec.val_scenes < 1:
        raise SpecError("scene counts must be >= 1")
    if spec.object_size > spec.image_size or spec.object_size < 8:
        raise SpecError(f"object size {spec.object_size} does not fit image {spec.image_size}")
    if spec.deformation < 0 or spec.deformation > spec.object_size / 4:
        raise SpecError(f"deformation {spec.deformation} pushes parts outside the object")
    rng = np.random.default_rng(spec.seed)
    train = _scenes(spec.train_scenes, spec, rng)
    val = _scenes(spec.val_scenes, spec, rng)
    return Dataset(spec, train, val)


def class_names(k: int) -> list:
    return [f"class{i}" for i in range(k)]


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ann, splits = {}, {}
    for split, scenes in (("train", ds.train), ("val", ds.val)):
        names = []
        for i, sc in enumerate(scenes):
            name = f"{split}_{i:05d}"
            save_tensor(sc.image, d / f"{name}.bin")
            ann[name] = {"theme": sc.theme,
                         "objects": [{"class": c, "box": b.as_list()} for c, b in sc.objects]}
            names.append(name)
        splits[split] = names
    manifest = {"spec": asdict(ds.spec), "classes": class_names(ds.spec.classes),
                "seed": ds.spec.seed, "splits": splits}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (d / "annotations.json").write_text(json.dumps(ann, indent=1, sort_keys=True))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    ann = json.loads((d / "annotations.json").read_text())
    spec = DatasetSpec(**manifest["spec"])
    out = {}
    for split, names in manifest["splits"].items():
        out[split] = [
            SyntheticScene(load_tensor(d / f"{n}.bin"),
                           [(o["class"], BoundingBox(*o["box"])) for o in ann[n]["objects"]],
                           ann[n]["theme"])
            for n in names
        ]
    return Dataset(spec, out["train"], out["val"])
