"""Shared domain types, errors and validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Union

import numpy as np

IGNORE_INDEX = 255
DEFAULT_EPSILON = 8 / 255
DEFAULT_STEP_SIZE = 2 / 255


class SegTransError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(SegTransError, ValueError):
    pass


class ValueOutOfRange(SegTransError, ValueError):
    pass


class InvalidCount(SegTransError, ValueError):
    pass


class EmptyCell(SegTransError, ValueError):
    pass


class RegionOutOfBounds(SegTransError, ValueError):
    pass


class InvalidConfig(SegTransError, ValueError):
    pass


class ModelGradientUnavailable(SegTransError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image / label containers


@dataclass(frozen=True)
class ImageTensor:
    """A channels x height x width image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"image must be C x H x W, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueOutOfRange("image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices; ``ignore_index`` marks unlabeled pixels."""

    data: np.ndarray
    num_classes: int
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeMismatch(f"label map must be H x W, got shape {data.shape}")
        if self.num_classes < 1:
            raise ValueOutOfRange("num_classes must be positive")
        data = data.astype(np.int64, copy=False)
        bad = ((data < 0) | (data >= self.num_classes)) & (data != self.ignore_index)
        if bad.any():
            raise ValueOutOfRange(
                f"label values must be in [0, {self.num_classes}) or {self.ignore_index}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


ImageLike = Union[ImageTensor, np.ndarray]
LabelLike = Union[LabelMap, np.ndarray]


def image_array(x: ImageLike) -> np.ndarray:
    return x.data if isinstance(x, ImageTensor) else np.asarray(x)


def label_array(y: LabelLike) -> np.ndarray:
    return y.data if isinstance(y, LabelMap) else np.asarray(y)


def validate_pair(x: ImageLike, y: LabelLike, num_classes: int | None = None,
                  ignore_index: int = IGNORE_INDEX) -> None:
    """Raise if ``x`` and ``y`` do not form a well-formed sample.

    Raw arrays are accepted; ``num_classes`` is then required to check the
    label range.
    """
    xa = image_array(x)
    ya = label_array(y)
    if xa.ndim != 3 or ya.ndim != 2:
        raise ShapeMismatch(f"expected C x H x W image and H x W labels, got {xa.shape} and {ya.shape}")
    if xa.shape[1:] != ya.shape:
        raise ShapeMismatch(f"image spatial shape {xa.shape[1:]} != label shape {ya.shape}")
    if not np.all(np.isfinite(xa)) or xa.min() < 0.0 or xa.max() > 1.0:
        raise ValueOutOfRange("pixel values must lie in [0, 1]")
    if isinstance(y, LabelMap):
        num_classes, ignore_index = y.num_classes, y.ignore_index
    if num_classes is not None:
        bad = ((ya < 0) | (ya >= num_classes)) & (ya != ignore_index)
        if bad.any():
            raise ValueOutOfRange(f"label outside [0, {num_classes}) and not {ignore_index}")


# ---------------------------------------------------------------------------
# perturbation and attack records


@dataclass(frozen=True)
class Perturbation:
    delta: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueOutOfRange("epsilon must lie in [0, 1]")

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0


@dataclass(frozen=True)
class GridSpec:
    """Partition of a ``width`` x ``height`` image into ``rows`` x ``cols`` cells.

    Cells are ``cell_width`` x ``cell_height`` pixels; the last column and
    last row absorb any residual pixels.
    """

    n_regions: int
    rows: int
    cols: int
    cell_width: int
    cell_height: int
    width: int
    height: int

    def cell_bounds(self, cell_index: int) -> tuple[int, int, int, int]:
        """Return ``(top, left, bottom, right)`` of a cell, row-major indexing."""
        if not 0 <= cell_index < self.n_regions:
            raise InvalidCount(f"cell index {cell_index} outside [0, {self.n_regions})")
        r, c = divmod(cell_index, self.cols)
        top, left = r * self.cell_height, c * self.cell_width
        bottom = self.height if r == self.rows - 1 else top + self.cell_height
        right = self.width if c == self.cols - 1 else left + self.cell_width
        return top, left, bottom, right


@dataclass(frozen=True)
class RegionSpec:
    """One retained rectangle.

    ``length`` is the horizontal extent (bounded by the nominal cell width)
    and ``width`` the vertical extent (bounded by the nominal cell height).
    ``top``/``left`` are offsets inside the cell whose origin is
    ``cell_top``/``cell_left``.
    """

    cell_index: int
    top: int
    left: int
    length: int
    width: int
    alpha: Fraction
    cell_top: int = 0
    cell_left: int = 0
    grid_cell_width: int = 0
    grid_cell_height: int = 0

    @property
    def abs_top(self) -> int:
        return self.cell_top + self.top

    @property
    def abs_left(self) -> int:
        return self.cell_left + self.left

    @property
    def area(self) -> int:
        return self.length * self.width


@dataclass(frozen=True)
class MaskBatch:
    masks: np.ndarray  # T x H x W, uint8 in {0, 1}
    regions: tuple[tuple[RegionSpec, ...], ...]

    def __len__(self) -> int:
        return len(self.masks)


# ---------------------------------------------------------------------------
# attack configuration


@dataclass(frozen=True)
class FixedSquare:
    side: int = 32

    def __post_init__(self):
        if self.side < 1:
            raise InvalidConfig("square side must be >= 1")


@dataclass(frozen=True)
class RandomRatio:
    alpha_min: float = 0.1
    alpha_max: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise InvalidConfig("need 0 <= alpha_min <= alpha_max <= 1")


RegionMode = Union[FixedSquare, RandomRatio]

UPDATE_MODES = ("sequential", "aggregated")
LOSS_SCOPES = ("all_pixels", "retained_pixels")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    iterations: int = 10
    remap_count: int = 5
    grid_count: int = 16
    region_mode: RegionMode = field(default_factory=FixedSquare)
    step_size: float = DEFAULT_STEP_SIZE
    update_mode: str = "sequential"
    loss_scope: str = "all_pixels"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise InvalidConfig(f"epsilon must be in (0, 1], got {self.epsilon}")
        if not 0.0 < self.step_size <= 1.0:
            raise InvalidConfig(f"step_size must be in (0, 1], got {self.step_size}")
        # iterations == 0 is allowed: it yields the identity attack
        if self.iterations < 0:
            raise InvalidConfig("iterations must be >= 0")
        if self.remap_count < 1 or self.grid_count < 1:
            raise InvalidConfig("remap_count and grid_count must be >= 1")
        if self.update_mode not in UPDATE_MODES:
            raise InvalidConfig(f"update_mode must be one of {UPDATE_MODES}")
        if self.loss_scope not in LOSS_SCOPES:
            raise InvalidConfig(f"loss_scope must be one of {LOSS_SCOPES}")

    @property
    def updates_per_run(self) -> int:
        if self.update_mode == "sequential":
            return self.iterations * self.remap_count
        return self.iterations


@dataclass
class AttackResult:
    delta: Perturbation
    adversarial_image: np.ndarray
    loss_trace: list[float]
    wall_time_seconds: float

    @property
    def update_count(self) -> int:
        return len(self.loss_trace)

