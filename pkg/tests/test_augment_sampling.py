import numpy as np
import pytest

from flare_ssm.data.augment import augment
from flare_ssm.data.preprocess import SolarSample
from flare_ssm.data.sampling import crt_resample
from flare_ssm.errors import DataError


def _img(seed=0):
    return np.random.default_rng(seed).standard_normal((2, 3, 16, 16)).astype(np.float32)


def test_zero_strength_is_identity():
    x = _img()
    out = augment(x, seed=3, strength=0.0)
    assert np.array_equal(out, x) and out is not x


def test_same_seed_same_pixels():
    x = _img()
    assert np.array_equal(augment(x, 5), augment(x, 5))
    assert not np.array_equal(augment(x, 5), augment(x, 6))


def test_label_and_missing_preserved():
    s = SolarSample(_img(), 1, 10, np.zeros((2, 3), bool))
    s.missing_mask[1, 2] = True
    s.images[1, 2] = 0
    out = SolarSample(augment(s.images, 0, missing=s.missing_mask), s.label, s.timestamp, s.missing_mask)
    assert out.label == 1 and out.images.shape == s.images.shape
    assert np.all(out.images[1, 2] == 0)


def test_augment_is_mild():
    x = _img()
    assert np.abs(augment(x, 1) - x).mean() < np.abs(x).mean()


def test_crt_ratio_and_balance():
    labels = np.repeat(np.arange(4), [10, 20, 30, 40])
    draws = []
    for seed in range(200):
        idx = crt_resample(labels, seed, per_class=40)
        hist = np.bincount(labels[idx], minlength=4)
        assert np.all(hist == 40)
        draws.append(np.bincount(idx[labels[idx] == 0], minlength=10)[:10].mean())
    assert np.mean(draws) == pytest.approx(4.0, abs=1e-9)


def test_crt_default_target_and_determinism():
    labels = np.repeat(np.arange(4), [3, 5, 9, 20])
    a, b = crt_resample(labels, 7), crt_resample(labels, 7)
    assert np.array_equal(a, b) and a.size == 80
    assert not np.array_equal(a, crt_resample(labels, 8))


def test_crt_empty_class_rejected():
    with pytest.raises(DataError, match="X"):
        crt_resample(np.array([1, 2, 3, 3]), 0)
