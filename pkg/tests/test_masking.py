import numpy as np
import pytest
from scipy import ndimage

from vqfill.errors import ConfigError
from vqfill.masking import MaskConfig, apply_mask, build_mask, default_mask_configs, stack_input


def components(m):
    _, count = ndimage.label(m)
    return count


def test_single_256_quarter_area():
    m = build_mask(default_mask_configs(256)["mask1"], 256, 256)
    assert m.sum() / m.size == 128**2 / 256**2
    assert components(m) == 1
    assert m[64:192, 64:192].all()  # centred


def test_grid16_256():
    m = build_mask(default_mask_configs(256)["mask16"], 256, 256)
    assert components(m) == 16
    assert m.sum() == 16 * 32**2 == 16384


def test_grid_centres():
    cfg = MaskConfig("g", "grid", 4, 8, 2, 2)
    m = build_mask(cfg, 32, 32)
    for ci in (8, 24):
        for cj in (8, 24):
            assert m[ci - 4:ci + 4, cj - 4:cj + 4].all()
    assert m.sum() == 4 * 64


@pytest.mark.parametrize("grid", [64, 256])
def test_default_configs_equal_area(grid):
    sums = {name: int(build_mask(c, grid, grid).sum()) for name, c in default_mask_configs(grid).items()}
    assert len(set(sums.values())) == 1
    assert next(iter(sums.values())) == grid * grid // 4


def test_desk_sides():
    cfgs = default_mask_configs(64)
    assert [cfgs[n].mask_side for n in ("mask1", "mask4", "mask16")] == [32, 16, 8]


def test_mask_dtype_and_values():
    m = build_mask(default_mask_configs(64)["mask4"], 64, 64)
    assert m.dtype == np.uint8
    assert set(np.unique(m)) == {0, 1}


def test_oversized_grid_squares_rejected():
    # Squares wider than their grid cell would overlap their neighbours.
    with pytest.raises(ConfigError):
        build_mask(MaskConfig("o", "grid", 4, 12, 2, 2), 16, 16)


def test_out_of_bounds_rejected():
    with pytest.raises(ConfigError):
        build_mask(MaskConfig("b", "single", 1, 40), 32, 32)


@pytest.mark.parametrize("kwargs", [
    dict(layout="ring"),
    dict(layout="single", count=4),
    dict(layout="grid", count=5, grid_rows=2, grid_cols=2),
    dict(mask_side=0),
    dict(placement="anywhere"),
])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        MaskConfig("x", **kwargs)


def test_random_placement_seeded_and_disjoint():
    cfg = MaskConfig("r", "grid", 4, 6, 2, 2, placement="random", seed=3)
    a, b = build_mask(cfg, 32, 32), build_mask(cfg, 32, 32)
    assert np.array_equal(a, b)
    assert a.sum() == 4 * 36
    other = build_mask(MaskConfig("r", "grid", 4, 6, 2, 2, placement="random", seed=4), 32, 32)
    assert not np.array_equal(a, other)


def test_apply_mask_empty_and_full(rng):
    x = rng.standard_normal((8, 8))
    assert np.array_equal(apply_mask(x, np.zeros((8, 8), np.uint8)).x_mask, x)
    assert np.all(apply_mask(x, np.ones((8, 8), np.uint8)).x_mask == 0)


def test_apply_mask_single_cell(rng):
    x = rng.standard_normal((8, 8)) + 5
    m = np.zeros((8, 8), np.uint8)
    m[3, 5] = 1
    diff = apply_mask(x, m).x_mask != x
    assert diff.sum() == 1 and diff[3, 5]


def test_apply_mask_shape_mismatch():
    with pytest.raises(ConfigError):
        apply_mask(np.zeros((8, 8)), np.zeros((4, 4)))


def test_stack_input_channels(rng):
    x = rng.standard_normal((16, 16))
    m = build_mask(MaskConfig("s", "single", 1, 6), 16, 16)
    s = stack_input(apply_mask(x, m))
    assert s.shape == (3, 16, 16)
    assert np.all(s[1] + s[2] == 1)
    assert np.all(s[0][s[2] == 1] == 0)
    known = s[1] == 1
    assert np.array_equal(s[0][known], x[known])


def test_stack_input_empty_mask(rng):
    s = stack_input(apply_mask(rng.standard_normal((8, 8)), np.zeros((8, 8), np.uint8)))
    assert np.all(s[1] == 1) and np.all(s[2] == 0)
