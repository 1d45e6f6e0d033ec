"""Grid partitioning, rectangle sampling and mask composition.

Each attack iteration draws ``T`` masks. A mask keeps one random rectangle
per grid cell (``N`` cells) and zeroes everything else; rectangles from
different masks may overlap freely.
"""

from __future__ import annotations

import math
import warnings
from fractions import Fraction
from typing import Iterable

import numpy as np

from .core import (
    AttackConfig,
    EmptyCell,
    FixedSquare,
    GridSpec,
    InvalidCount,
    MaskBatch,
    RandomRatio,
    RegionMode,
    RegionOutOfBounds,
    RegionSpec,
)


class SquareClampWarning(RuntimeWarning):
    """Requested square side exceeds the grid cell and was clamped."""


def partition_grid(width: int, height: int, n_regions: int) -> GridSpec:
    """Split an image into ``n_regions`` cells.

    The ``rows x cols`` factorisation whose cell aspect best matches the
    image is chosen, ties going to more columns.
    """
    if n_regions < 1:
        raise InvalidCount(f"n_regions must be >= 1, got {n_regions}")
    if width < 1 or height < 1:
        raise InvalidCount(f"image must be at least 1x1, got {width}x{height}")
    target = width / height
    best = None
    for rows in range(1, n_regions + 1):
        if n_regions % rows:
            continue
        cols = n_regions // rows
        key = (abs(cols / rows - target), -cols)
        if best is None or key < best[0]:
            best = (key, rows, cols)
    _, rows, cols = best
    return GridSpec(
        n_regions=n_regions,
        rows=rows,
        cols=cols,
        cell_width=width // cols,
        cell_height=height // rows,
        width=width,
        height=height,
    )


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def sample_rectangle(grid: GridSpec, cell_index: int, mode: RegionMode,
                     rng: np.random.Generator) -> RegionSpec:
    """Draw one rectangle inside grid cell ``cell_index``."""
    top0, left0, bottom, right = grid.cell_bounds(cell_index)
    gw, gh = grid.cell_width, grid.cell_height
    if gw < 1 or gh < 1:
        raise EmptyCell(f"cell {cell_index} is {gw}x{gh} pixels")

    if isinstance(mode, FixedSquare):
        # each axis is clamped to the cell separately, so an oversized
        # square covers a non-square cell completely
        length, width = min(mode.side, gw), min(mode.side, gh)
        if (length, width) != (mode.side, mode.side):
            warnings.warn(
                f"square side {mode.side} clamped to {length}x{width} for {gw}x{gh} cells",
                SquareClampWarning,
                stacklevel=3,
            )
    elif isinstance(mode, RandomRatio):
        alpha = rng.uniform(mode.alpha_min, mode.alpha_max)
        target_area = alpha * gw * gh
        feasible = [
            (l, _round_half_up(target_area / l))
            for l in range(1, gw + 1)
            if 1 <= _round_half_up(target_area / l) <= gh
        ]
        if feasible:
            length, width = feasible[rng.integers(len(feasible))]
        else:
            length = width = 1
    else:
        raise TypeError(f"unknown region mode {mode!r}")

    # placement uses the real cell extent, which is larger for the last row/col
    top = int(rng.integers(0, bottom - top0 - width + 1))
    left = int(rng.integers(0, right - left0 - length + 1))
    return RegionSpec(
        cell_index=cell_index,
        top=top,
        left=left,
        length=int(length),
        width=int(width),
        alpha=Fraction(int(length) * int(width), gw * gh),
        cell_top=top0,
        cell_left=left0,
        grid_cell_width=gw,
        grid_cell_height=gh,
    )


def compose_mask(regions: Iterable[RegionSpec], width: int, height: int) -> np.ndarray:
    """Union of rectangle indicators, as a ``height x width`` uint8 array."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for r in regions:
        t, l = r.abs_top, r.abs_left
        if t < 0 or l < 0 or t + r.width > height or l + r.length > width:
            raise RegionOutOfBounds(
                f"region at ({t}, {l}) of size {r.width}x{r.length} exceeds {height}x{width}"
            )
        mask[t:t + r.width, l:l + r.length] = 1
    return mask


def sample_mask_batch(width: int, height: int, cfg: AttackConfig,
                      rng: np.random.Generator) -> MaskBatch:
    """Draw ``cfg.remap_count`` masks, each with one rectangle per grid cell."""
    grid = partition_grid(width, height, cfg.grid_count)
    masks = np.empty((cfg.remap_count, height, width), dtype=np.uint8)
    regions = []
    for j in range(cfg.remap_count):
        rects = tuple(
            sample_rectangle(grid, i, cfg.region_mode, rng) for i in range(grid.n_regions)
        )
        masks[j] = compose_mask(rects, width, height)
        regions.append(rects)
    return MaskBatch(masks=masks, regions=tuple(regions))
