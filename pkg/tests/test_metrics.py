import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_dtw, reference_hurst
from stgforecast.errors import ConstantSeries, LengthMismatch, SeriesTooShort, ZeroActual, ZeroBaseline
from stgforecast.metrics import dtw, hurst, improvement_rate, mae, mape


# --- hurst ----------------------------------------------------------------------

def test_hurst_white_noise():
    x = np.random.default_rng(0).normal(size=4096)
    h = hurst(x)
    assert abs(h - 0.5) <= 0.1
    assert h == pytest.approx(reference_hurst(x), abs=1e-9)


def test_hurst_random_walk():
    walk = np.cumsum(np.random.default_rng(1).normal(size=4096))
    h = hurst(walk)
    assert abs(h - 1.0) <= 0.1
    assert h == pytest.approx(reference_hurst(walk), abs=1e-9)


@given(st.floats(0.01, 1000), st.floats(-1e4, 1e4), st.integers(0, 50))
def test_hurst_affine_invariant(alpha, beta, seed):
    x = np.random.default_rng(seed).normal(size=256)
    assert hurst(alpha * x + beta) == pytest.approx(hurst(x), abs=1e-6)


def test_hurst_guards():
    with pytest.raises(SeriesTooShort):
        hurst(np.arange(31.0))
    with pytest.raises(ConstantSeries):
        hurst(np.ones(64))
    h = hurst(np.random.default_rng(2).normal(size=64))
    assert 0.0 <= h <= 1.5


# --- dtw ------------------------------------------------------------------------

def test_dtw_examples():
    assert dtw([1, 2, 3], [1, 3]) == 1.0
    x = np.random.default_rng(0).normal(size=17)
    assert dtw(x, x) == 0.0
    with pytest.raises(LengthMismatch):
        dtw([], [1.0])


def test_dtw_symmetric():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x, y = rng.normal(size=rng.integers(1, 20)), rng.normal(size=rng.integers(1, 20))
        assert dtw(x, y) == dtw(y, x)


def test_dtw_exhaustive_small_lengths():
    # every pair of lengths up to 4 over a small alphabet, exhaustively
    for n, m in itertools.product(range(1, 4), repeat=2):
        for x in itertools.product(range(3), repeat=n):
            for y in itertools.product(range(3), repeat=m):
                assert dtw(x, y) == brute_force_dtw(x, y)


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-100, 100)),
       st.integers(0, 1000))
def test_dtw_bounded_by_euclidean(x, seed):
    y = x + np.random.default_rng(seed).normal(size=x.shape)
    assert dtw(x, y) <= np.sqrt(np.sum((x - y) ** 2)) + 1e-12


# --- mae / mape / ir ------------------------------------------------------------

def test_mae_mape_examples():
    assert mae([100, 200], [100, 200]) == 0.0 and mape([100, 200], [100, 200]) == 0.0
    assert mae([100, 200], [110, 180]) == 15.0
    assert mape([100, 200], [110, 180]) == pytest.approx(0.1)
    with pytest.raises(ZeroActual):
        mape([0.0, 1.0], [1.0, 1.0])
    with pytest.raises(LengthMismatch):
        mae([1, 2], [1])


@given(arrays(np.float64, 8, elements=st.floats(1, 1e4)), arrays(np.float64, 8, elements=st.floats(0, 1e4)),
       st.floats(0.1, 100), st.permutations(range(8)))
def test_mae_mape_scaling_and_permutation(a, p, alpha, perm):
    perm = list(perm)
    assert mae(alpha * a, alpha * p) == pytest.approx(alpha * mae(a, p), rel=1e-12)
    assert mape(alpha * a, alpha * p) == pytest.approx(mape(a, p), rel=1e-12)
    assert mae(a[perm], p[perm]) == pytest.approx(mae(a, p), rel=1e-12)
    assert mape(a[perm], p[perm]) == pytest.approx(mape(a, p), rel=1e-12)


def test_improvement_rate():
    assert improvement_rate(0.3, 0.3) == 0.0
    assert improvement_rate(0.2, 0.1) == 50.0
    arima = np.mean([0.216, 0.329, 0.308, 0.399])
    ours = np.mean([0.094, 0.108, 0.119, 0.132])
    assert arima == pytest.approx(0.313) and ours == pytest.approx(0.11325)
    assert improvement_rate(arima, ours) == pytest.approx(63.78, abs=0.1)
    with pytest.raises(ZeroBaseline):
        improvement_rate(0.0, 0.1)
