"""Synthetic shapes dataset and folder loaders.

Shapes dataset classes: 0 background, 1 circle, 2 square, 3 triangle.
Triangles are usually drawn touching a square so that the two classes
co-occur, giving the models context to lean on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .core import IGNORE_INDEX, ImageTensor, LabelMap, SegTransError, ValueOutOfRange

BACKGROUND, CIRCLE, SQUARE, TRIANGLE = 0, 1, 2, 3
SHAPE_NAMES = {CIRCLE: "circle", SQUARE: "square", TRIANGLE: "triangle"}
ADJACENCY_PROB = 0.7


class InvalidParams(SegTransError, ValueError):
    pass


class MissingPair(SegTransError, FileNotFoundError):
    pass


class UnreadableFile(SegTransError, OSError):
    pass


class LabelValueOutOfRange(ValueOutOfRange):
    pass


@dataclass
class DatasetHandle:
    items: list[tuple[ImageTensor, LabelMap]]
    num_classes: int
    split: str = "all"
    meta: list[dict] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def __iter__(self) -> Iterator[tuple[ImageTensor, LabelMap]]:
        return iter(self.items)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(N x C x H x W float32, N x H x W int64)`` arrays."""
        xs = np.stack([x.data for x, _ in self.items]).astype(np.float32)
        ys = np.stack([y.data for _, y in self.items])
        return xs, ys

    def subset(self, indices, split: str | None = None) -> "DatasetHandle":
        indices = list(indices)
        return DatasetHandle(
            items=[self.items[i] for i in indices],
            num_classes=self.num_classes,
            split=split or self.split,
            meta=[self.meta[i] for i in indices] if self.meta else [],
            names=[self.names[i] for i in indices] if self.names else [],
        )


# ---------------------------------------------------------------------------
# rasterisation


def shape_mask(kind: int, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    """Boolean mask of a shape, testing integer pixel coordinates."""
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == CIRCLE:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == SQUARE:
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == TRIANGLE:
        # apex up: (cy - r, cx), base corners (cy + r, cx -/+ r)
        inside_base = yy <= cy + r
        t = (yy - (cy - r)) / (2 * r)  # 0 at apex, 1 at base
        return inside_base & (t >= 0) & (np.abs(xx - cx) <= t * r)
    raise ValueError(f"unknown shape kind {kind}")


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    base = rng.uniform(0.3, 0.7, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    freq = rng.uniform(2.0, 6.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wave = 0.5 * (np.sin(2 * np.pi * freq[0] * yy + phase[0]) + np.sin(2 * np.pi * freq[1] * xx + phase[1]))
    tint = rng.uniform(-1.0, 1.0, size=3)
    img = base[:, None, None] + 0.06 * tint[:, None, None] * wave[None]
    img = img + rng.normal(0.0, 0.02, size=(3, size, size))
    return img, base


STRIPE_ANGLES = {CIRCLE: 0.0, SQUARE: np.pi / 2, TRIANGLE: np.pi / 4}


def _class_texture(kind: int, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    theta = STRIPE_ANGLES[kind]
    period = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    return 0.12 * np.sin(2 * np.pi * (np.cos(theta) * yy + np.sin(theta) * xx) / period + phase)


def _pick_color(rng: np.random.Generator, avoid: np.ndarray) -> np.ndarray:
    for _ in range(100):
        c = rng.uniform(0.08, 0.92, size=3)
        if np.abs(c - avoid).mean() >= 0.2:
            return c
    return c


def _render_item(rng: np.random.Generator, size: int, num_classes: int):
    img, bg = _background(rng, size)
    label = np.zeros((size, size), dtype=np.int64)
    n_shapes = int(rng.integers(1, 4))
    kinds = [int(k) for k in rng.integers(1, num_classes, size=n_shapes)]
    # squares first so triangles can be placed against them
    kinds.sort(key=lambda k: 0 if k == SQUARE else 1)
    shapes = []
    squares = []
    for kind in kinds:
        r = float(rng.uniform(size / 10, size / 5))
        if kind == TRIANGLE and squares and rng.random() < ADJACENCY_PROB:
            sq = squares[int(rng.integers(len(squares)))]
            dy, dx = [(0, -1), (0, 1), (-1, 0), (1, 0)][int(rng.integers(4))]
            gap = sq["r"] + r + 1
            cy = float(np.clip(sq["cy"] + dy * gap, r, size - 1 - r))
            cx = float(np.clip(sq["cx"] + dx * gap, r, size - 1 - r))
            adjacent = True
        else:
            cy = float(rng.uniform(r, size - 1 - r))
            cx = float(rng.uniform(r, size - 1 - r))
            adjacent = False
        color = _pick_color(rng, bg)
        m = shape_mask(kind, cy, cx, r, size)
        texture = _class_texture(kind, rng, size)[m]
        noise = rng.normal(0.0, 0.02, size=(3, int(m.sum())))
        img[:, m] = color[:, None] + texture[None] + noise
        label[m] = kind
        rec = {"kind": kind, "cy": cy, "cx": cx, "r": r, "color": color.tolist(), "adjacent": adjacent}
        shapes.append(rec)
        if kind == SQUARE:
            squares.append(rec)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, label, shapes


def gen_shapes_dataset(count: int, size: int = 64, num_classes: int = 4, seed: int = 0,
                       split: str = "all") -> DatasetHandle:
    """Generate ``count`` textured images with 1-3 shapes each."""
    if count < 1 or size < 32:
        raise InvalidParams(f"need count >= 1 and size >= 32, got count={count} size={size}")
    if not 2 <= num_classes <= 4:
        raise InvalidParams("shapes dataset supports 2 to 4 classes")
    items, meta = [], []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        img, label, shapes = _render_item(rng, size, num_classes)
        items.append((ImageTensor(img), LabelMap(label, num_classes)))
        meta.append({"shapes": shapes})
    return DatasetHandle(items=items, num_classes=num_classes, split=split, meta=meta,
                         names=[f"shape_{seed}_{i:05d}" for i in range(count)])


def split(handle: DatasetHandle, train_fraction: float, seed: int = 0) -> tuple[DatasetHandle, DatasetHandle]:
    """Shuffled, disjoint, exhaustive train/val split."""
    if not 0.0 < train_fraction < 1.0:
        raise InvalidParams(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(handle))
    n_train = int(round(train_fraction * len(handle)))
    return (handle.subset(order[:n_train], "train"), handle.subset(order[n_train:], "val"))


# ---------------------------------------------------------------------------
# folder layout: root/images/<stem>.png and root/labels/<stem>.png

LAYOUTS = ("voc_style", "cityscapes_style")
DEFAULT_CLASSES = {"voc_style": 21, "cityscapes_style": 19}


def _collect(root: Path, layout: str) -> dict[str, Path]:
    pattern = "*.png" if layout == "voc_style" else "*/*.png"
    return {p.relative_to(root).with_suffix("").as_posix(): p for p in root.glob(pattern)}


def load_folder_dataset(root_path, layout: str = "voc_style", num_classes: int | None = None,
                        ignore_index: int = IGNORE_INDEX) -> DatasetHandle:
    """Load matched image/label PNG pairs ordered by stem.

    ``voc_style`` reads flat directories, ``cityscapes_style`` one level of
    per-city subdirectories.
    """
    if layout not in LAYOUTS:
        raise InvalidParams(f"layout must be one of {LAYOUTS}")
    root = Path(root_path)
    num_classes = num_classes or DEFAULT_CLASSES[layout]
    images = _collect(root / "images", layout)
    labels = _collect(root / "labels", layout)
    if not images and not labels:
        raise MissingPair(f"no image/label pairs under {root}")
    for stem in sorted(images):
        if stem not in labels:
            raise MissingPair(f"image {stem!r} has no matching label file")
    for stem in sorted(labels):
        if stem not in images:
            raise MissingPair(f"label {stem!r} has no matching image file")
    items, names = [], []
    for stem in sorted(images):
        try:
            with Image.open(images[stem]) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            with Image.open(labels[stem]) as im:
                if im.mode not in ("L", "P"):
                    raise UnreadableFile(f"label {labels[stem]} is not single-channel ({im.mode})")
                lab = np.asarray(im, dtype=np.int64)
        except OSError as exc:
            raise UnreadableFile(f"cannot read pair {stem!r}: {exc}") from exc
        bad = (lab >= num_classes) & (lab != ignore_index)
        if bad.any():
            v = int(lab[bad][0])
            raise LabelValueOutOfRange(f"label {stem!r} contains value {v} (num_classes={num_classes})")
        if img.shape[:2] != lab.shape:
            raise InvalidParams(f"pair {stem!r}: image {img.shape[:2]} vs label {lab.shape}")
        items.append((ImageTensor(img.transpose(2, 0, 1)), LabelMap(lab, num_classes, ignore_index)))
        names.append(stem)
    return DatasetHandle(items=items, num_classes=num_classes, split=root.name, names=names)


def export_folder_dataset(handle: DatasetHandle, root_path) -> Path:
    """Write a dataset in the voc_style layout (8-bit RGB, 8-bit labels)."""
    root = Path(root_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    names = handle.names or [f"{i:05d}" for i in range(len(handle))]
    for name, (x, y) in zip(names, handle.items):
        rgb = np.round(x.data.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(rgb).save(root / "images" / f"{name}.png")
        Image.fromarray(y.data.astype(np.uint8)).save(root / "labels" / f"{name}.png")
    return root
