"""Synthetic iconic-object corpus with base/novel class splits.

A base class is a color; its instances take any shape from a shared pool.
A novel class pairs the color of one base class with a shape never seen in
the pool, so a detector that learned only the color cue (all it needs for
the base classes) confuses novel instances with that base class.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..rng import rng_for

SHAPES = ("circle", "cross", "square", "hbar", "triangle", "ring", "diamond", "star")
BASE_SHAPES = ("circle", "square", "triangle", "cross")
NOVEL_SHAPES = ("ring", "star", "hbar", "diamond")
COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "magenta": (0.85, 0.2, 0.85),
    "cyan": (0.1, 0.85, 0.85),
    "orange": (0.95, 0.55, 0.1),
    "white": (0.95, 0.95, 0.95),
}
COLOR_NAMES = tuple(COLORS)
MAX_ROTATION = np.pi / 6
COLOR_JITTER = 0.1


@dataclass(frozen=True)
class ClassSpec:
    index: int
    shapes: tuple
    color: str
    novel: bool

    @property
    def name(self) -> str:
        return f"{self.color}-{'|'.join(self.shapes)}" if len(self.shapes) > 1 else f"{self.color}-{self.shapes[0]}"


@dataclass
class DetImage:
    image: np.ndarray  # (3, H, W)
    boxes: np.ndarray  # (n, 4) x0, y0, x1, y1
    labels: np.ndarray  # (n,)
    image_id: str


@dataclass
class SyntheticCorpus:
    seed: int
    classes: list[ClassSpec]
    num_base: int
    num_novel: int
    k: int
    image_size: int
    iconic_images: np.ndarray  # (N, 3, S, S), base classes only
    iconic_labels: np.ndarray
    det_base: list[DetImage]  # stage-1 detection images (base objects only)
    fewshot_novel: list[DetImage]  # k instances per novel class
    fewshot_base: list[DetImage]  # k instances per base class (balanced fine-tuning)
    test: list[DetImage]
    meta: dict = field(default_factory=dict)

    @property
    def base_classes(self) -> list[int]:
        return list(range(self.num_base))

    @property
    def novel_classes(self) -> list[int]:
        return list(range(self.num_base, self.num_base + self.num_novel))

    @property
    def num_classes(self) -> int:
        return self.num_base + self.num_novel

    def finetune_set(self, mode: str = "balanced") -> list[DetImage]:
        if mode == "balanced":
            return self.fewshot_base + self.fewshot_novel
        if mode == "novel_only":
            return list(self.fewshot_novel)
        raise ValueError(f"unknown finetune_set {mode!r}")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.iconic_images.tobytes())
        h.update(self.iconic_labels.tobytes())
        for split in (self.det_base, self.fewshot_novel, self.fewshot_base, self.test):
            for d in split:
                h.update(d.image.tobytes())
                h.update(d.boxes.tobytes())
                h.update(d.labels.tobytes())
        return h.hexdigest()


def class_table(num_base: int, num_novel: int) -> list[ClassSpec]:
    if num_base < 2 or num_novel < 1:
        raise ValueError(f"need num_base >= 2 and num_novel >= 1, got {num_base}, {num_novel}")
    if num_base > len(COLORS):
        raise ValueError(f"at most {len(COLORS)} base classes are supported, got {num_base}")
    if num_novel > min(num_base, len(NOVEL_SHAPES)):
        raise ValueError(f"num_novel ({num_novel}) may not exceed {min(num_base, len(NOVEL_SHAPES))}")
    specs = [ClassSpec(i, BASE_SHAPES, COLOR_NAMES[i], False) for i in range(num_base)]
    for j in range(num_novel):
        specs.append(ClassSpec(num_base + j, (NOVEL_SHAPES[j],), COLOR_NAMES[j], True))
    return specs


# -- rendering ----------------------------------------------------------------------


def shape_mask(shape: str, size: int, box, angle: float = 0.0) -> np.ndarray:
    """Boolean (size, size) mask of ``shape`` inscribed in ``box``, rotated by ``angle`` radians."""
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    u0 = (xs - cx) / ((x1 - x0) / 2)
    v0 = (ys - cy) / ((y1 - y0) / 2)
    cos, sin = np.cos(angle), np.sin(angle)
    u, v = cos * u0 + sin * v0, -sin * u0 + cos * v0
    r = np.hypot(u, v)
    if shape == "circle":
        m = r <= 1.0
    elif shape == "square":
        m = (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    elif shape == "triangle":
        m = (v >= -0.9) & (v <= 0.9) & (np.abs(u) <= (v + 0.9) / 1.8)
    elif shape == "cross":
        m = ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.95))
    elif shape == "ring":
        m = (r <= 1.0) & (r >= 0.55)
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "hbar":
        m = (np.abs(v) <= 0.35) & (np.abs(u) <= 0.95)
    elif shape == "star":
        theta = np.arctan2(v, u)
        m = r <= 0.55 + 0.4 * np.cos(5 * theta)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    level = rng.uniform(0.3, 0.55)
    img = np.full((3, size, size), level) + rng.normal(0.0, 0.04, size=(3, size, size))
    return img


def _paint(img: np.ndarray, spec: ClassSpec, box, rng: np.random.Generator) -> np.ndarray:
    """Paint the object; returns its tight integer bounding box."""
    size = img.shape[-1]
    shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
    mask = shape_mask(shape, size, box, rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    if not mask.any():
        mask = shape_mask(shape, size, box)
    color = np.asarray(COLORS[spec.color]) + rng.normal(0.0, COLOR_JITTER, size=3)
    shade = 1.0 + rng.normal(0.0, 0.05, size=mask.shape)
    for ch in range(3):
        img[ch][mask] = np.clip(color[ch] * shade[mask], 0.0, 1.0)
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def render_iconic(seed: int, spec: ClassSpec, index: int, size: int) -> np.ndarray:
    """A tight crop of one object; pure function of (seed, class, index)."""
    rng = rng_for(seed, "iconic", spec.index, index)
    img = _background(rng, size)
    extent = rng.uniform(0.7, 0.92) * size
    aspect = rng.uniform(0.85, 1.15)
    w, h = extent * aspect ** 0.5, extent / aspect ** 0.5
    w, h = min(w, size - 2), min(h, size - 2)
    cx = size / 2 + rng.uniform(-0.06, 0.06) * size
    cy = size / 2 + rng.uniform(-0.06, 0.06) * size
    x0 = np.clip(cx - w / 2, 1, size - 1 - w)
    y0 = np.clip(cy - h / 2, 1, size - 1 - h)
    _paint(img, spec, (x0, y0, x0 + w, y0 + h), rng)
    return np.clip(img, 0.0, 1.0)


def render_detection(
    seed: int, split: str, index: int, specs: list[ClassSpec], size: int, obj_range=(0.3, 0.45)
) -> DetImage:
    """Canvas with the given objects placed without overlap; pure in (seed, split, index)."""
    rng = rng_for(seed, "det", split, index)
    img = _background(rng, size)
    boxes, placed = [], []
    for spec in specs:
        for attempt in range(400):
            s = rng.uniform(*obj_range) * size * 0.995**attempt
            x0 = rng.uniform(1, size - 1 - s)
            y0 = rng.uniform(1, size - 1 - s)
            cand = (x0, y0, x0 + s, y0 + s)
            if all(cand[2] <= p[0] or cand[0] >= p[2] or cand[3] <= p[1] or cand[1] >= p[3] for p in placed):
                break
        else:
            raise RuntimeError(f"could not place {len(specs)} objects on a {size}px canvas")
        placed.append(cand)
        boxes.append(_paint(img, spec, cand, rng))
    return DetImage(
        np.clip(img, 0.0, 1.0),
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray([s.index for s in specs], dtype=np.intp),
        f"{split}/{index}",
    )


def _object_plan(classes: list[int], per_class: int, rng: np.random.Generator, max_objects: int) -> list[list[int]]:
    """Shuffle per_class instances of each class into images of 1..max_objects objects."""
    pool = np.repeat(np.asarray(classes), per_class)
    rng.shuffle(pool)
    images, i = [], 0
    while i < len(pool):
        n = int(rng.integers(1, max_objects + 1))
        images.append([int(c) for c in pool[i : i + n]])
        i += n
    return images


def build_corpus(
    seed: int,
    num_base: int = 6,
    num_novel: int = 2,
    per_class: int = 200,
    k: int = 5,
    image_size: int = 64,
    det_per_class: int = 60,
    test_per_class: int = 40,
    max_objects: int = 3,
    object_scale: tuple = (0.3, 0.45),
    canvas_size: int | None = None,
) -> SyntheticCorpus:
    """``image_size`` is the iconic crop size; detection canvases use ``canvas_size`` (default: the same)."""
    canvas = canvas_size or image_size
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if per_class < 1 or det_per_class < 1 or test_per_class < 1:
        raise ValueError("per-class counts must be positive")
    if max_objects < 1 or max_objects > 3:
        raise ValueError(f"max_objects must be in 1..3, got {max_objects}")
    specs = class_table(num_base, num_novel)
    base = specs[:num_base]
    lo, hi = object_scale
    if not 0.05 <= lo <= hi <= 0.6:
        raise ValueError(f"object_scale must satisfy 0.05 <= lo <= hi <= 0.6, got {object_scale}")

    def render(split, index, objs):
        return render_detection(seed, split, index, objs, canvas, (lo, hi))

    iconic = np.stack([render_iconic(seed, s, i, image_size) for s in base for i in range(per_class)])
    iconic_labels = np.repeat(np.arange(num_base), per_class).astype(np.intp)

    plan_rng = rng_for(seed, "plan")
    det_base = [
        render("base", i, [specs[c] for c in objs])
        for i, objs in enumerate(_object_plan(list(range(num_base)), det_per_class, plan_rng, max_objects))
    ]
    fewshot_novel = [
        render("shot-novel", j * k + i, [s])
        for j, s in enumerate(specs[num_base:])
        for i in range(k)
    ]
    fewshot_base = [
        render("shot-base", j * k + i, [s]) for j, s in enumerate(base) for i in range(k)
    ]
    test_rng = rng_for(seed, "test-plan")
    test = [
        render("test", i, [specs[c] for c in objs])
        for i, objs in enumerate(_object_plan(list(range(len(specs))), test_per_class, test_rng, max_objects))
    ]
    return SyntheticCorpus(
        seed=seed,
        classes=specs,
        num_base=num_base,
        num_novel=num_novel,
        k=k,
        image_size=image_size,
        iconic_images=iconic,
        iconic_labels=iconic_labels,
        det_base=det_base,
        fewshot_novel=fewshot_novel,
        fewshot_base=fewshot_base,
        test=test,
    )
