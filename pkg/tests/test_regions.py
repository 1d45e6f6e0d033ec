import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segtrans.core import (
    AttackConfig,
    EmptyCell,
    FixedSquare,
    InvalidCount,
    RandomRatio,
    RegionOutOfBounds,
    RegionSpec,
)
from segtrans.regions import (
    SquareClampWarning,
    compose_mask,
    partition_grid,
    sample_mask_batch,
    sample_rectangle,
)


def brute_force_union(regions, width, height):
    """Pixel-by-pixel membership test, independent of slicing."""
    out = np.zeros((height, width), dtype=np.uint8)
    for yy in range(height):
        for xx in range(width):
            for r in regions:
                if r.abs_top <= yy < r.abs_top + r.width and r.abs_left <= xx < r.abs_left + r.length:
                    out[yy, xx] = 1
                    break
    return out


def test_partition_default_grid():
    g = partition_grid(256, 256, 16)
    assert (g.rows, g.cols, g.cell_width, g.cell_height) == (4, 4, 64, 64)


def test_partition_single_cell():
    g = partition_grid(37, 21, 1)
    assert (g.rows, g.cols) == (1, 1)
    assert g.cell_bounds(0) == (0, 0, 21, 37)


def test_partition_non_square_image():
    # factor pairs (1,6),(2,3),(3,2),(6,1); |cols/rows - 1.5| is smallest for 2 rows x 3 cols
    g = partition_grid(300, 200, 6)
    assert (g.rows, g.cols, g.cell_width, g.cell_height) == (2, 3, 100, 100)


def test_partition_rejects_bad_counts():
    with pytest.raises(InvalidCount):
        partition_grid(64, 64, 0)
    with pytest.raises(InvalidCount):
        partition_grid(0, 64, 4)


def test_residual_pixels_go_to_last_row_and_column():
    g = partition_grid(10, 7, 4)
    assert (g.rows, g.cols, g.cell_width, g.cell_height) == (2, 2, 5, 3)
    assert g.cell_bounds(3) == (3, 5, 7, 10)


def test_fixed_square_in_64_cell():
    g = partition_grid(256, 256, 16)
    r = sample_rectangle(g, 5, FixedSquare(32), np.random.default_rng(0))
    assert (r.length, r.width) == (32, 32)
    assert r.alpha == Fraction(1, 4)
    assert 0 <= r.top <= 32 and 0 <= r.left <= 32


def test_fixed_square_clamps_with_warning():
    g = partition_grid(64, 64, 16)
    with pytest.warns(SquareClampWarning):
        r = sample_rectangle(g, 0, FixedSquare(32), np.random.default_rng(0))
    assert (r.length, r.width, r.top, r.left) == (16, 16, 0, 0)
    assert r.alpha == 1


def test_random_ratio_alpha_one_fills_cell():
    g = partition_grid(256, 256, 16)
    r = sample_rectangle(g, 7, RandomRatio(1.0, 1.0), np.random.default_rng(3))
    assert (r.length, r.width, r.top, r.left) == (64, 64, 0, 0)
    assert r.alpha == 1


def test_random_ratio_mean_alpha():
    g = partition_grid(64, 64, 1)
    rng = np.random.default_rng(11)
    alphas = [float(sample_rectangle(g, 0, RandomRatio(0.1, 0.9), rng).alpha) for _ in range(10_000)]
    assert np.mean(alphas) == pytest.approx(0.5, abs=0.02)


def test_empty_cell_raises():
    g = partition_grid(3, 3, 9)
    assert g.cell_width == 1
    sample_rectangle(g, 0, FixedSquare(1), np.random.default_rng(0))
    with pytest.raises(EmptyCell):
        sample_rectangle(partition_grid(2, 2, 3), 0, FixedSquare(1), np.random.default_rng(0))


def test_compose_empty_and_full():
    assert compose_mask([], 5, 4).sum() == 0
    full = RegionSpec(0, 0, 0, length=5, width=4, alpha=Fraction(1))
    assert (compose_mask([full], 5, 4) == 1).all()


def test_compose_two_overlapping_squares():
    a = RegionSpec(0, top=0, left=0, length=2, width=2, alpha=Fraction(1, 4))
    b = RegionSpec(0, top=1, left=1, length=2, width=2, alpha=Fraction(1, 4))
    m = compose_mask([a, b], 4, 4)
    assert m.sum() == 7
    assert (m == brute_force_union([a, b], 4, 4)).all()


def test_compose_rejects_out_of_bounds():
    with pytest.raises(RegionOutOfBounds):
        compose_mask([RegionSpec(0, top=3, left=0, length=2, width=2, alpha=Fraction(1))], 4, 4)


def test_default_batch_shape():
    cfg = AttackConfig(remap_count=5, grid_count=16)
    batch = sample_mask_batch(256, 256, cfg, np.random.default_rng(0))
    assert batch.masks.shape == (5, 256, 256)
    assert len(batch) == 5
    g = partition_grid(256, 256, 16)
    for rects in batch.regions:
        assert sorted(r.cell_index for r in rects) == list(range(16))
        for r in rects:
            t, l, b, rt = g.cell_bounds(r.cell_index)
            assert t <= r.abs_top and r.abs_top + r.width <= b
            assert l <= r.abs_left and r.abs_left + r.length <= rt


def test_degenerate_full_image_mask():
    cfg = AttackConfig(remap_count=1, grid_count=1, region_mode=FixedSquare(300))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SquareClampWarning)
        batch = sample_mask_batch(64, 48, cfg, np.random.default_rng(0))
    assert (batch.masks == 1).all()


@settings(max_examples=100)
@given(
    width=st.integers(16, 96),
    height=st.integers(16, 96),
    n=st.sampled_from([1, 2, 4, 6, 9, 16]),
    t=st.integers(1, 4),
    ratio=st.booleans(),
    side=st.integers(1, 40),
    seed=st.integers(0, 2**32 - 1),
)
def test_area_identity_and_mask_union(width, height, n, t, ratio, side, seed):
    mode = RandomRatio(0.1, 0.9) if ratio else FixedSquare(side)
    cfg = AttackConfig(remap_count=t, grid_count=n, region_mode=mode)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SquareClampWarning)
        batch = sample_mask_batch(width, height, cfg, np.random.default_rng(seed))
    lhs = sum(r.length * r.width for rects in batch.regions for r in rects)
    rhs = sum(r.alpha * r.grid_cell_width * r.grid_cell_height for rects in batch.regions for r in rects)
    assert lhs == rhs
    assert set(np.unique(batch.masks)) <= {0, 1}
    for m, rects in zip(batch.masks, batch.regions):
        assert (m == compose_mask(rects, width, height)).all()
        for r in rects:
            assert 1 <= r.length <= r.grid_cell_width and 1 <= r.width <= r.grid_cell_height


def test_batch_is_reproducible_from_seed():
    cfg = AttackConfig(region_mode=RandomRatio())
    a = sample_mask_batch(64, 64, cfg, np.random.default_rng(5))
    b = sample_mask_batch(64, 64, cfg, np.random.default_rng(5))
    assert (a.masks == b.masks).all() and a.regions == b.regions
