"""Synthetic multi-scale shapes standing in for COCO.

Dataset directory layout::

    <dir>/annotations.txt        one record per line, see below
    <dir>/images/<id:06d>.bin    weight-container file with one record "image"
                                 (3 x H x W float32, values in [0, 1])

Annotation grammar (space separated, floats written with ``repr``)::

    dataset <n_images> <height> <width> <seed>
    image <id> <n_objects>
    object <image_id> <class_name> <x1> <y1> <x2> <y2> <rle>

``rle`` is the row-major run-length encoding of the object's H x W binary
mask over the whole image: comma-separated run lengths alternating 0-runs
and 1-runs, starting with a (possibly empty) 0-run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import load_weights, save_weights

CLASSES = ("square", "circle", "triangle")
CLASS_IDS = {name: i + 1 for i, name in enumerate(CLASSES)}


@dataclass
class DataSpec:
    image_size: int = 128
    min_size: float = 12.0
    max_size: float = 96.0
    min_objects: int = 1
    max_objects: int = 4

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError("image_size must be a multiple of 32")
        if not 0 < self.min_size < self.max_size <= self.image_size:
            raise ValueError("need 0 < min_size < max_size <= image_size")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")


@dataclass
class SceneObject:
    cls: str
    box: np.ndarray   # [x1, y1, x2, y2], tight around the mask
    mask: np.ndarray  # H x W bool

    @property
    def label(self) -> int:
        return CLASS_IDS[self.cls]


@dataclass
class SyntheticScene:
    image: np.ndarray  # 3 x H x W float32
    objects: list[SceneObject] = field(default_factory=list)
    seed: int = 0

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.label for o in self.objects], dtype=np.int64)

    @property
    def masks(self) -> list[np.ndarray]:
        return [o.mask for o in self.objects]


def _shape_mask(cls: str, size: int, x0: int, y0: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5 - x0, yy + 0.5 - y0
    if cls == "square":
        m = (px >= 0) & (px < size) & (py >= 0) & (py < size)
    elif cls == "circle":
        r = size / 2
        m = (px - r) ** 2 + (py - r) ** 2 <= r * r
    else:
        # upright isosceles triangle filling the size x size square
        m = (py >= 0) & (py < size) & (np.abs(px - size / 2) <= py / 2)
    return m


def _tight_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def make_scene(rng: np.random.Generator, spec: DataSpec, seed: int = 0) -> SyntheticScene:
    n = spec.image_size
    yy, xx = np.mgrid[0:n, 0:n] / n
    base = rng.uniform(0.0, 0.3, size=3)
    tilt = rng.uniform(-0.1, 0.1, size=(3, 2))
    image = base[:, None, None] + tilt[:, 0, None, None] * xx + tilt[:, 1, None, None] * yy
    image = image + rng.normal(0, 0.02, size=(3, n, n))
    objects: list[SceneObject] = []
    occupied = np.zeros((n, n), dtype=bool)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(count):
        for _attempt in range(20):
            size = int(round(math.exp(rng.uniform(math.log(spec.min_size), math.log(spec.max_size)))))
            cls = CLASSES[int(rng.integers(len(CLASSES)))]
            x0 = int(rng.integers(0, n - size + 1))
            y0 = int(rng.integers(0, n - size + 1))
            mask = _shape_mask(cls, size, x0, y0, n, n)
            if not mask.any():
                continue
            if (mask & occupied).any():
                continue
            colour = rng.uniform(0.5, 1.0, size=3)
            image[:, mask] = colour[:, None]
            occupied |= mask
            objects.append(SceneObject(cls, _tight_box(mask), mask))
            break
    return SyntheticScene(np.clip(image, 0, 1).astype(np.float32), objects, seed)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7, index])


def generate_scenes(n_images: int, seed: int, spec: DataSpec | None = None) -> list[SyntheticScene]:
    spec = spec or DataSpec()
    return [make_scene(scene_rng(seed, i), spec, seed) for i in range(n_images)]


# ---------------------------------------------------------------- RLE


def rle_encode(mask: np.ndarray) -> str:
    flat = np.asarray(mask, dtype=bool).reshape(-1).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return ",".join(str(r) for r in runs)


def rle_decode(rle: str, shape: tuple[int, int]) -> np.ndarray:
    runs = [int(r) for r in rle.split(",")] if rle else []
    flat = np.zeros(int(np.prod(shape)), dtype=bool)
    pos, value = 0, False
    for r in runs:
        if value:
            flat[pos : pos + r] = True
        pos += r
        value = not value
    if pos != flat.size:
        raise ValueError(f"RLE covers {pos} pixels, mask has {flat.size}")
    return flat.reshape(shape)


# ---------------------------------------------------------------- disk format


def write_dataset(out_dir: str | Path, scenes: list[SyntheticScene], seed: int) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    h, w = scenes[0].image.shape[1:] if scenes else (0, 0)
    lines = [f"dataset {len(scenes)} {h} {w} {seed}"]
    for i, sc in enumerate(scenes):
        save_weights(out / "images" / f"{i:06d}.bin", {"image": sc.image})
        lines.append(f"image {i} {len(sc.objects)}")
        for o in sc.objects:
            coords = " ".join(repr(float(v)) for v in o.box)
            lines.append(f"object {i} {o.cls} {coords} {rle_encode(o.mask)}")
    (out / "annotations.txt").write_text("\n".join(lines) + "\n")
    return out


def generate_dataset(out_dir: str | Path, n_images: int, seed: int, spec: DataSpec | None = None) -> Path:
    return write_dataset(out_dir, generate_scenes(n_images, seed, spec), seed)


def read_dataset(path: str | Path) -> list[SyntheticScene]:
    root = Path(path)
    ann = root / "annotations.txt"
    if not ann.exists():
        raise FileNotFoundError(f"{root} has no annotations.txt")
    lines = ann.read_text().splitlines()
    head = lines[0].split()
    if head[0] != "dataset":
        raise ValueError(f"{ann}: bad header")
    n, h, w, seed = (int(v) for v in head[1:5])
    objects: dict[int, list[SceneObject]] = {i: [] for i in range(n)}
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "object":
            i = int(parts[1])
            box = np.array([float(v) for v in parts[3:7]])
            rle = parts[7] if len(parts) > 7 else ""
            objects[i].append(SceneObject(parts[2], box, rle_decode(rle, (h, w))))
    scenes = []
    for i in range(n):
        image = load_weights(root / "images" / f"{i:06d}.bin")["image"]
        scenes.append(SyntheticScene(image, objects[i], seed))
    return scenes
