import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpmr.metrics import EXACT, format_metrics, mean_in_mask, nrmse, psnr


def test_nrmse_examples():
    a = np.random.default_rng(0).uniform(size=(8, 8))
    assert nrmse(a, a) == 0.0
    assert nrmse(np.zeros((4, 4)), np.ones((4, 4))) == 1.0


def test_nrmse_matches_two_pass():
    rng = np.random.default_rng(1)
    t, r = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    num = sum((t[i, j] - r[i, j]) ** 2 for i in range(16) for j in range(16))
    den = sum(r[i, j] ** 2 for i in range(16) for j in range(16))
    assert abs(nrmse(t, r) - math.sqrt(num / den)) < 1e-9


def test_nrmse_mask_and_errors():
    ref = np.ones((3, 3))
    test = ref.copy()
    test[0, 0] = 3.0
    mask = np.zeros((3, 3), bool)
    mask[1:, 1:] = True
    assert nrmse(test, ref, mask) == 0.0
    with pytest.raises(ValueError):
        nrmse(test, np.zeros((3, 3)))
    with pytest.raises(ValueError):
        nrmse(test, ref, np.zeros((3, 3), bool))
    with pytest.raises(ValueError):
        nrmse(test, np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_nrmse_scale_invariant(k, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(5, 5)), rng.uniform(0.1, 1.0, size=(5, 5))
    assert nrmse(k * a, k * b) == pytest.approx(nrmse(a, b), rel=1e-9)


def test_psnr_examples():
    ref = np.random.default_rng(2).uniform(size=(6, 6))
    assert psnr(ref, ref) == EXACT
    peak = ref.max()
    assert psnr(ref + peak, ref) == pytest.approx(0.0, abs=1e-9)


def test_psnr_hand_formula():
    rng = np.random.default_rng(3)
    ref, test = rng.uniform(size=(10, 10)), rng.uniform(size=(10, 10))
    mse = sum((test.flat[i] - ref.flat[i]) ** 2 for i in range(100)) / 100
    assert abs(psnr(test, ref) - 10 * math.log10(ref.max() ** 2 / mse)) < 1e-6


def test_psnr_decreases_with_mse():
    ref = np.linspace(0, 1, 25).reshape(5, 5)
    values = [psnr(ref + e, ref) for e in (0.01, 0.02, 0.05, 0.1)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_mean_in_mask():
    assert mean_in_mask(np.full((4, 4), 0.5), np.eye(4, dtype=bool)) == 0.5
    g = np.arange(9.0).reshape(3, 3)
    one = np.zeros((3, 3), bool)
    one[2, 1] = True
    assert mean_in_mask(g, one) == 7.0
    rng = np.random.default_rng(4)
    vals, mask = rng.uniform(size=(7, 7)), rng.uniform(size=(7, 7)) > 0.5
    acc, n = 0.0, 0
    for i in range(7):
        for j in range(7):
            if mask[i, j]:
                acc += vals[i, j]
                n += 1
    assert abs(mean_in_mask(vals, mask) - acc / n) < 1e-12
    with pytest.raises(ValueError):
        mean_in_mask(vals, np.zeros((7, 7), bool))


def test_format_metrics():
    text = format_metrics({"nrmse": 0.25, "psnr": EXACT})
    assert text.splitlines() == ["nrmse=0.25", "psnr=exact"]
