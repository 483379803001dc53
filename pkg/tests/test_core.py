import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from luminark.core import (
    LUMINANCE,
    ChannelWeights,
    KeyFormatError,
    LayoutError,
    PatchLayout,
    SplitMix64,
    WatermarkKey,
    binary_pattern,
    derive_seed,
    from_uint8,
    generate_key,
    generate_key_arrays,
    load_image,
    luminance,
    match_count,
    match_rate,
    partition,
    patch_luminance,
    reassemble,
    resize_to_grid,
    save_png,
    signs,
    splitmix64,
    to_uint8,
)
from oracles import splitmix_scalar

UNIT = st.floats(0.0, 1.0, allow_nan=False)


def test_splitmix_reference_vector():
    assert splitmix64(7, 3).tolist() == [7191089600892374487, 309689372594955804, 16616101746815609346]
    assert splitmix64(0, 1).tolist() == [0xE220A8397B1DCDAF]


@given(st.integers(0, 2**64 - 1), st.integers(1, 40))
@settings(max_examples=50, deadline=None)
def test_splitmix_matches_scalar_loop(seed, n):
    assert splitmix64(seed, n).tolist() == splitmix_scalar(seed, n)


def test_splitmix_stream_is_resumable():
    g = SplitMix64(99)
    a = np.concatenate([g.next_u64(5), g.next_u64(7)])
    assert np.array_equal(a, splitmix64(99, 12))
    assert derive_seed(99, 4) == int(a[4])


def test_uniform_range_and_normal_moments():
    g = SplitMix64(1)
    u = g.uniform(200_000)
    assert u.min() >= 0 and u.max() < 1
    z = SplitMix64(2).normal(200_001)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_seed_range_checked():
    with pytest.raises(ValueError):
        SplitMix64(-1)
    with pytest.raises(ValueError):
        SplitMix64(2**64)


def test_layout_rejects_bad_grid():
    with pytest.raises(LayoutError):
        PatchLayout(100, 64, 64)
    with pytest.raises(LayoutError):
        PatchLayout(64, 64, 0)
    lay = PatchLayout(512, 512, 64)
    assert (lay.rows, lay.cols, lay.num_patches) == (8, 8, 64)
    with pytest.raises(LayoutError):
        lay.check(np.zeros((256, 256, 3)))


def test_patch_order_is_row_major():
    lay = PatchLayout(4, 6, 2)
    img = np.zeros((4, 6, 3))
    for i in range(lay.num_patches):
        img[lay.patch_slices(i)] = i / 10
    assert np.allclose(patch_luminance(img, lay), np.arange(6) / 10)
    assert lay.patch_slices(4) == (slice(2, 4), slice(2, 4))
    assert lay.mirror_permutation().tolist() == [2, 1, 0, 5, 4, 3]


def test_luminance_of_constant_patch():
    patch = np.ones((4, 4, 3)) * [0.2, 0.4, 0.6]
    assert luminance(patch) == pytest.approx(0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6)
    assert luminance(np.ones((3, 3, 3)), ChannelWeights(1, 0, 0)) == pytest.approx(1.0)


@given(arrays(np.float64, (8, 12, 3), elements=UNIT))
@settings(max_examples=50, deadline=None)
def test_partition_reassemble_roundtrip(img):
    lay = PatchLayout(8, 12, 4)
    assert np.array_equal(reassemble(partition(img, lay), lay), img)
    lum = patch_luminance(img, lay)
    assert np.allclose(lum, [luminance(p) for p in partition(img, lay)], atol=1e-12)


@given(arrays(np.float64, (8, 8, 3), elements=UNIT))
@settings(max_examples=50, deadline=None)
def test_luminance_stays_in_unit_interval(img):
    lum = patch_luminance(img, PatchLayout(8, 8, 4))
    assert np.all(lum >= -1e-12) and np.all(lum <= 1 + 1e-12)


def test_sign_of_zero_is_positive():
    assert signs(np.array([-0.1, 0.0, 0.3])).tolist() == [-1, 1, 1]


def test_tie_at_threshold_counts_as_plus_one():
    lay = PatchLayout(4, 4, 4)
    # single-channel weights so the patch luminance is exactly 0.5
    key = WatermarkKey(lay, np.array([1]), np.array([0.5]), ChannelWeights(1, 0, 0))
    img = np.full((4, 4, 3), 0.5)
    assert binary_pattern(img, key).tolist() == [1]
    assert match_count(img, key) == 1


def test_frozen_key_values():
    key = generate_key(7, PatchLayout(512, 512, 64))
    assert key.c[:8].tolist() == [-1, -1, 1, 1, -1, -1, -1, -1]
    assert np.allclose(key.tau[:3], [0.49268759, 0.47165751, 0.55933824], atol=1e-8)
    assert np.all((key.tau >= 0.4) & (key.tau < 0.6))


def test_key_generation_deterministic_and_batched():
    lay = PatchLayout(256, 256, 32)
    a, b = generate_key(11, lay), generate_key(11, lay)
    assert a == b and hash(a) == hash(b)
    assert generate_key(12, lay) != a
    c, tau = generate_key_arrays(np.array([11, 12], dtype=np.uint64), lay.num_patches)
    assert np.array_equal(c[0], a.c) and np.array_equal(tau[0], a.tau)
    assert np.array_equal(c[1], generate_key(12, lay).c)


def test_key_arrays_are_readonly(small_key):
    with pytest.raises(ValueError):
        small_key.c[0] = 1


def test_key_roundtrip_exact(tmp_path, small_key):
    p = tmp_path / "k.json"
    small_key.save(p)
    back = WatermarkKey.load(p)
    assert back == small_key
    assert np.array_equal(back.tau, small_key.tau)
    assert (p.stat().st_mode & 0o777) == 0o600
    text = p.read_text()
    small_key.save(p)
    assert p.read_text() == text


def test_key_validation():
    lay = PatchLayout(8, 8, 4)
    with pytest.raises(KeyFormatError):
        WatermarkKey(lay, np.array([1, 0, 1, 1]), np.full(4, 0.5))
    with pytest.raises(KeyFormatError):
        WatermarkKey(lay, np.ones(4), np.array([0.5, 0.5, 1.0, 0.5]))
    with pytest.raises(KeyFormatError):
        WatermarkKey(lay, np.ones(3), np.full(3, 0.5))
    d = generate_key(1, lay).to_dict()
    d["c"] = d["c"][:-1]
    with pytest.raises(KeyFormatError):
        WatermarkKey.from_dict(json.loads(json.dumps(d)))


def test_weight_variants():
    assert ChannelWeights.variant("luminance") == LUMINANCE
    r = ChannelWeights.variant("random", seed=5)
    assert r == ChannelWeights.variant("random", seed=5)
    assert r.total == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ChannelWeights.variant("random")
    with pytest.raises(ValueError):
        ChannelWeights(0, 0, 0)


def test_match_rate_against_own_pattern(small_key, rng):
    img = rng.random((64, 64, 3))
    bits = binary_pattern(img, small_key)
    mk = WatermarkKey(small_key.layout, bits, small_key.tau)
    assert match_rate(img, mk) == 1.0
    anti = WatermarkKey(small_key.layout, -bits, small_key.tau)
    assert match_rate(img, anti) == 0.0


def test_uint8_roundtrip_and_png(tmp_path, rng):
    u8 = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert np.array_equal(to_uint8(from_uint8(u8)), u8)
    p = tmp_path / "x.png"
    save_png(p, from_uint8(u8))
    assert np.array_equal(to_uint8(load_image(p)), u8)
    assert not list(tmp_path.glob(".tmp-*"))


def test_resize_to_grid():
    img = np.full((100, 130, 3), 0.5)
    out = resize_to_grid(img, 32)
    assert out.shape == (96, 128, 3)
    assert resize_to_grid(np.zeros((64, 64, 3)), 32).shape == (64, 64, 3)


def test_canonical_weights_sum_to_one():
    assert LUMINANCE.total == 1.0


@given(arrays(np.float64, (8, 8, 3), elements=UNIT), st.integers(0, 2**32))
@settings(max_examples=40, deadline=None)
def test_match_rate_ignores_pixel_order_within_patches(img, seed):
    lay = PatchLayout(8, 8, 4)
    key = generate_key(seed, lay)
    perm = np.random.default_rng(seed).permutation(16)
    shuffled = reassemble([p.reshape(16, 3)[perm].reshape(4, 4, 3) for p in partition(img, lay)], lay)
    assert np.allclose(patch_luminance(shuffled, lay), patch_luminance(img, lay), atol=1e-12)
    assert match_rate(shuffled, key) == match_rate(img, key) or np.any(
        np.abs(patch_luminance(img, lay) - key.tau) < 1e-12
    )


def test_match_counts_are_binomial_over_keys():
    from scipy import stats

    from luminark.certify import match_counts_for_keys
    from luminark.templates import smooth_field

    lay = PatchLayout(512, 512, 64)
    lum = patch_luminance(smooth_field(3, 512), lay)
    c, tau = generate_key_arrays(splitmix64(2024, 100_000), lay.num_patches)
    counts = match_counts_for_keys(lum, c, tau)
    # pool the sparse tails so every expected cell count is at least 5
    edges = np.arange(20, 46)
    observed = np.array([np.count_nonzero(counts < 20)] + [np.count_nonzero(counts == k) for k in edges[:-1]]
                        + [np.count_nonzero(counts >= 45)])
    pmf = stats.binom(64, 0.5)
    expected = np.array([pmf.cdf(19)] + [pmf.pmf(k) for k in edges[:-1]] + [pmf.sf(44)]) * counts.size
    assert expected.min() >= 5
    _, p = stats.chisquare(observed, expected)
    assert p > 1e-3


def test_generate_key_is_byte_identical():
    lay = PatchLayout(256, 256, 32)
    a = json.dumps(generate_key(3, lay, tau_low=0.3, tau_high=0.7).to_dict())
    assert a == json.dumps(generate_key(3, lay, tau_low=0.3, tau_high=0.7).to_dict())
