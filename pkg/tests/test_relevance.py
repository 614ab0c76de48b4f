import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relevance_forge.errors import ConfigError, DegenerateMapError, DimensionError, RankRangeError
from relevance_forge.relevance import (
    RelevanceConfig,
    bin_ranks,
    combine_sequences,
    generate_relevance,
    paint_superpixels,
    top_regions,
)
from relevance_forge.slic3d import SlicConfig, SuperpixelMap, slic_segment

RAW = RelevanceConfig(low_mask_is_relevant=False)


def halves_map():
    labels = np.zeros((4, 4, 4), dtype=int)
    labels[:, :, 2:] = 1
    return SuperpixelMap(labels, 2)


def brute_force_paint(mask, labels):
    out = np.zeros(mask.shape)
    for idx in itertools.product(*map(range, mask.shape)):
        out[idx] = sum(mask[j] for j in itertools.product(*map(range, mask.shape)) if labels[j] == labels[idx])
    return out


def test_single_superpixel_constant_mask():
    sp = SuperpixelMap(np.zeros((4, 4, 4), dtype=int), 1)
    painted = paint_superpixels(np.full((4, 4, 4), 0.25), sp)
    np.testing.assert_array_equal(painted, np.full((4, 4, 4), 64 * 0.25))


def test_two_halves_paint_zero_and_thirty_two():
    sp = halves_map()
    mask = np.zeros((4, 4, 4))
    mask[:, :, 2:] = 1.0
    painted = paint_superpixels(mask, sp)
    assert set(np.unique(painted[:, :, :2])) == {0.0}
    assert set(np.unique(painted[:, :, 2:])) == {32.0}


def test_paint_matches_brute_force():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=(4, 4, 4))
    labels[0, 0, :] = np.arange(4)
    labels[0, 1, 0] = 4
    mask = rng.integers(0, 4, size=(4, 4, 4)).astype(float)
    painted = paint_superpixels(mask, SuperpixelMap(labels, 5))
    np.testing.assert_array_equal(painted, brute_force_paint(mask, labels))


def test_paint_is_order_free_within_region():
    sp = halves_map()
    mask = np.random.default_rng(1).random((4, 4, 4))
    shuffled = mask.copy()
    region = sp.labels == 0
    shuffled[region] = np.random.default_rng(2).permutation(mask[region])
    np.testing.assert_allclose(paint_superpixels(mask, sp), paint_superpixels(shuffled, sp), rtol=1e-12)


def test_region_value_consistency():
    image = np.random.default_rng(3).random((8, 8, 8))
    sp = slic_segment(image, SlicConfig(k=6))
    painted = paint_superpixels(np.random.default_rng(4).random((8, 8, 8)), sp)
    for s in range(sp.count):
        vals = painted[sp.labels == s]
        assert np.all(vals == vals[0])
        assert np.isclose(np.sum(vals / vals.size), vals[0])


def test_mean_mode_divides_by_size():
    sp = halves_map()
    painted = paint_superpixels(np.ones((4, 4, 4)), sp, mode="mean")
    np.testing.assert_array_equal(painted, np.ones((4, 4, 4)))


def test_paint_shape_mismatch():
    with pytest.raises(DimensionError):
        paint_superpixels(np.zeros((4, 4, 5)), halves_map())


def test_combine_single_is_identity_and_double_doubles():
    a = np.random.default_rng(5).random((4, 4, 4))
    np.testing.assert_array_equal(combine_sequences([a]), a)
    np.testing.assert_array_equal(combine_sequences([a, a]), 2 * a)


def test_combine_disjoint_support_is_union():
    a = np.zeros((4, 4, 4))
    b = np.zeros((4, 4, 4))
    a[:2] = 3.0
    b[2:] = 7.0
    out = combine_sequences([a, b])
    np.testing.assert_array_equal(out[:2], 3.0)
    np.testing.assert_array_equal(out[2:], 7.0)


def test_combine_commutative_on_integer_values():
    rng = np.random.default_rng(6)
    vols = [rng.integers(0, 100, size=(3, 3, 3)).astype(float) for _ in range(3)]
    base = combine_sequences(vols)
    for perm in itertools.permutations(vols):
        np.testing.assert_array_equal(combine_sequences(list(perm)), base)


@pytest.mark.parametrize("bad", [[], [np.zeros((2, 2, 2)), np.zeros((2, 2, 3))]])
def test_combine_errors(bad):
    with pytest.raises(DimensionError):
        combine_sequences(bad)


def decade_volume():
    return np.arange(100, dtype=float).reshape(4, 5, 5)


def test_decade_bins():
    rm = bin_ranks(decade_volume(), RelevanceConfig(bins=10, low_mask_is_relevant=False))
    values = decade_volume()
    for r in range(10):
        got = set(values[rm.bins == r].astype(int).tolist())
        assert got == set(range(90 - 10 * r, 100 - 10 * r))


def test_top_region_zero_is_ten_highest():
    rm = bin_ranks(decade_volume(), RAW)
    region = top_regions(rm, 0)
    assert region.sum() == 10
    assert decade_volume()[region].min() == 90


def test_default_orientation_inverts():
    rm = bin_ranks(decade_volume(), RelevanceConfig())
    assert set(decade_volume()[rm.bins == 0].astype(int).tolist()) == set(range(10))
    assert rm.score_direction == "low-mask-is-relevant"


def test_two_bins_on_binary_values():
    vals = np.zeros((2, 2, 2))
    vals[0] = 1
    rm = bin_ranks(vals, RelevanceConfig(bins=2, low_mask_is_relevant=False))
    np.testing.assert_array_equal(rm.bins == 0, vals == 1)


def test_top_regions_partition_and_range():
    rm = bin_ranks(np.random.default_rng(7).random((5, 5, 5)), RAW)
    masks = [top_regions(rm, r) for r in range(rm.bin_count)]
    assert np.all(sum(m.astype(int) for m in masks) == 1)
    with pytest.raises(RankRangeError):
        top_regions(rm, rm.bin_count)
    with pytest.raises(RankRangeError):
        top_regions(rm, -1)


def test_constant_map_is_degenerate():
    with pytest.raises(DegenerateMapError):
        bin_ranks(np.full((3, 3, 3), 4.0))


def test_bin_count_validated():
    with pytest.raises(ConfigError):
        bin_ranks(decade_volume(), RelevanceConfig(bins=1))


@pytest.mark.parametrize("seed", range(50))
def test_rank_means_monotonic(seed):
    rng = np.random.default_rng(seed)
    scores = rng.gamma(1.0 + seed % 3, size=(6, 6, 6)) * rng.integers(1, 4, size=(6, 6, 6))
    rm = bin_ranks(scores, RelevanceConfig(bins=int(rng.integers(2, 12)), low_mask_is_relevant=bool(seed % 2)))
    assert np.any(rm.bins == 0)
    means = [m for m in rm.rank_means() if not np.isnan(m)]
    assert all(a > b for a, b in zip(means, means[1:]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=8, max_size=8), st.integers(2, 12))
def test_bins_cover_all_voxels(values, b):
    arr = np.array(values).reshape(2, 2, 2)
    if arr.max() == arr.min():
        with pytest.raises(DegenerateMapError):
            bin_ranks(arr, RelevanceConfig(bins=b))
        return
    rm = bin_ranks(arr, RelevanceConfig(bins=b))
    assert rm.bins.min() >= 0 and rm.bins.max() < b
    assert np.any(rm.bins == 0)


def test_generate_relevance_identical_channels_doubles():
    rng = np.random.default_rng(8)
    channel = rng.random((8, 8, 8))
    mask_c = rng.random((8, 8, 8))
    cfg = RelevanceConfig(slic=SlicConfig(k=8))
    single = generate_relevance(channel[None], mask_c[None], cfg)
    double = generate_relevance(np.stack([channel, channel]), np.stack([mask_c, mask_c]), cfg)
    np.testing.assert_allclose(double.combined, 2 * single.combined, rtol=1e-12)
    np.testing.assert_array_equal(double.bins, single.bins)


def test_generate_relevance_deterministic_and_shape_checked():
    rng = np.random.default_rng(9)
    vol = rng.random((2, 8, 8, 8))
    mask = rng.random((2, 8, 8, 8))
    cfg = RelevanceConfig(slic=SlicConfig(k=8))
    assert generate_relevance(vol, mask, cfg) == generate_relevance(vol, mask, cfg)
    with pytest.raises(DimensionError):
        generate_relevance(vol, mask[:1], cfg)


def test_generate_relevance_finds_dark_region():
    vol = np.zeros((1, 8, 8, 8))
    vol[0, :, :, :4] = 1.0
    mask = np.ones_like(vol)
    mask[0, :, :, :4] = 0.1
    rm = generate_relevance(vol, mask, RelevanceConfig(slic=SlicConfig(k=2, m=0.01)))
    np.testing.assert_array_equal(top_regions(rm, 0), vol[0] == 1.0)
