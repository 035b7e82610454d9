from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adaptlab.augment import (
    AugmentPolicy, NAMED_AUGMENTATIONS, apply_policy, cutmix_mask, cutout_mask, gaussian_noise, mixup,
    named_policies,
)
from adaptlab.errors import ConfigError


def batch(n=6, d=5, C=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.integers(0, C, n)


# --- mixup ---------------------------------------------------------------------

def test_mixup_lambda_one_is_identity():
    x, y = batch()
    out = mixup(x, y, num_classes=3, lam=1.0, seed=0)
    assert np.array_equal(out.features, x)
    assert np.array_equal(out.soft_targets, np.eye(3)[y])


def test_mixup_definition_arithmetic():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = mixup(x, [0, 1], num_classes=2, lam=0.3, perm=[1, 0])
    np.testing.assert_allclose(out.features[0], [0.3, 0.7])
    np.testing.assert_allclose(out.soft_targets[0], [0.3, 0.7])
    assert out.used_soft_labels


def test_mixup_lambda_in_unit_interval():
    x = np.eye(2)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        w = mixup(x, [0, 1], 1.0, rng, num_classes=2).soft_targets[0, 0]
        assert 0.0 <= w <= 1.0


def test_mixup_needs_two_rows():
    with pytest.raises(ValueError):
        mixup(np.ones((1, 3)), [0], num_classes=2)


# --- cutmix ----------------------------------------------------------------------

def test_cutmix_empty_block_is_identity():
    x, y = batch()
    out = cutmix_mask(x, y, num_classes=3, block=(2, 2), seed=0)
    assert np.array_equal(out.features, x)
    assert np.array_equal(out.soft_targets, np.eye(3)[y])


def test_cutmix_full_block_copies_partner():
    x, y = batch()
    perm = np.roll(np.arange(6), 1)
    out = cutmix_mask(x, y, num_classes=3, block=(0, 5), perm=perm)
    assert np.array_equal(out.features, x[perm])
    assert np.array_equal(out.soft_targets, np.eye(3)[y[perm]])


def test_cutmix_half_block_weights():
    x = np.arange(8, dtype=float).reshape(2, 4)
    out = cutmix_mask(x, [0, 1], num_classes=2, block=(2, 4), perm=[1, 0])
    np.testing.assert_allclose(out.soft_targets[0], [0.5, 0.5])
    np.testing.assert_array_equal(out.features[0], [0, 1, 6, 7])


def test_cutmix_needs_two_rows_and_coords():
    with pytest.raises(ValueError):
        cutmix_mask(np.ones((1, 3)), [0], num_classes=2)
    with pytest.raises(ValueError):
        cutmix_mask(np.ones((3, 1)), [0, 0, 1], num_classes=2)


# --- noise and cutout ------------------------------------------------------------------

def test_noise_limit_and_determinism():
    x, y = batch()
    assert np.allclose(gaussian_noise(x, y, 1e-12, 0, num_classes=3).features, x)
    a = gaussian_noise(x, y, 0.5, 4, num_classes=3).features
    b = gaussian_noise(x, y, 0.5, 4, num_classes=3).features
    assert np.array_equal(a, b)
    out = gaussian_noise(x, y, 0.5, 4, num_classes=3)
    assert not out.used_soft_labels and np.array_equal(out.soft_targets, np.eye(3)[y])


def test_noise_sample_std():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1000, 100)) * 3
    sigma = 0.4
    out = gaussian_noise(x, np.zeros(1000, int), sigma, 1, num_classes=1)
    target = sigma * np.linalg.norm(x, axis=1).mean() / np.sqrt(100)
    assert abs((out.features - x).std() / target - 1) < 0.05


def test_cutout_floor_zero_is_identity():
    x, y = batch(d=3)
    assert np.array_equal(cutout_mask(x, y, 0.2, 0, num_classes=3).features, x)


def test_cutout_count_and_untouched_coordinates():
    rng = np.random.default_rng(2)
    x = rng.uniform(1, 2, (50, 10))
    out = cutout_mask(x, np.zeros(50, int), 0.3, 3, num_classes=1).features
    zeroed = out == 0
    assert np.all(zeroed.sum(1) == 3)
    assert np.array_equal(out[~zeroed], x[~zeroed])
    for row in zeroed:
        cols = np.flatnonzero(row)
        assert cols[-1] - cols[0] == 2  # contiguous


# --- policies ------------------------------------------------------------------------

def test_none_policy_is_identity():
    x, y = batch()
    counter = Counter()
    out = apply_policy(AugmentPolicy("none"), x, y, 0, num_classes=3, counter=counter)
    assert np.array_equal(out.features, x) and np.array_equal(out.soft_targets, np.eye(3)[y])
    assert sum(counter.values()) == 0


def test_probability_zero_never_fires():
    x, y = batch()
    counter = Counter()
    policy = AugmentPolicy("mixup", apply_probability=0.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        out = apply_policy(policy, x, y, rng, num_classes=3, counter=counter)
        assert np.array_equal(out.features, x)
    assert counter["mixup"] == 0


def test_probability_one_mixup_always_soft():
    x, y = batch()
    counter = Counter()
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert apply_policy(AugmentPolicy("mixup"), x, y, rng, num_classes=3, counter=counter).used_soft_labels
    assert counter["mixup"] == 50


def test_policy_validation():
    with pytest.raises(ConfigError):
        AugmentPolicy("rotate")
    with pytest.raises(ConfigError):
        AugmentPolicy("mixup", apply_probability=1.5)
    with pytest.raises(ConfigError):
        AugmentPolicy("gaussian_noise", sigma=0)
    with pytest.raises(ConfigError):
        AugmentPolicy("cutout_mask", mask_fraction=1.0)
    with pytest.raises(ConfigError):
        AugmentPolicy.from_dict({"kind": "mixup", "beta": 2})
    with pytest.raises(ConfigError):
        apply_policy("mixup", np.ones((2, 2)), [0, 1], num_classes=2)


def test_policy_dict_round_trip():
    p = AugmentPolicy("cutout_mask", mask_fraction=0.2, apply_probability=0.5)
    assert AugmentPolicy.from_dict(p.to_dict()) == p


def test_named_bundles():
    assert named_policies("mixup")[0].kind == "mixup"
    assert {p.kind for p in named_policies("augmix-analog")} == {"gaussian_noise", "cutout_mask"}
    with pytest.raises(ConfigError):
        named_policies("autoaugment")
    for name, policies in NAMED_AUGMENTATIONS.items():
        assert policies and all(isinstance(p, AugmentPolicy) for p in policies), name


# --- properties --------------------------------------------------------------------------

kinds = st.sampled_from(["mixup", "cutmix_mask", "gaussian_noise", "cutout_mask", "none"])


@given(kind=kinds, seed=st.integers(0, 10_000), n=st.integers(2, 12), d=st.integers(2, 9), C=st.integers(1, 5))
def test_augmented_batch_invariants(kind, seed, n, d, C):
    x, y = batch(n, d, C, seed)
    out = apply_policy(AugmentPolicy(kind), x, y, seed, num_classes=C)
    assert out.features.shape == (n, d)
    assert out.soft_targets.shape == (n, C)
    np.testing.assert_allclose(out.soft_targets.sum(1), 1.0, atol=1e-6)


@given(seed=st.integers(0, 10_000), n=st.integers(2, 12), d=st.integers(2, 9))
def test_interpolation_stays_between_sources(seed, n, d):
    x, y = batch(n, d, 3, seed)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    m = mixup(x, y, 1.0, seed, num_classes=3, perm=perm).features
    lo, hi = np.minimum(x, x[perm]), np.maximum(x, x[perm])
    assert np.all(m >= lo - 1e-12) and np.all(m <= hi + 1e-12)
    c = cutmix_mask(x, y, 1.0, seed, num_classes=3, perm=perm).features
    assert np.all((c == x) | (c == x[perm]))
