"""Sample-quality metrics (Hurst, DTW) and forecast-accuracy metrics (MAE, MAPE, IR)."""
from __future__ import annotations

import numpy as np
from numba import njit

from .errors import ConstantSeries, LengthMismatch, SeriesTooShort, ZeroActual, ZeroBaseline

HURST_MIN_BLOCK = 8
HURST_RANGE = (0.0, 1.5)


def rescaled_range(block: np.ndarray) -> float:
    """R/S of one block; NaN when the block has zero spread."""
    dev = np.cumsum(block - block.mean())
    s = block.std()
    if s == 0:
        return np.nan
    return (dev.max() - dev.min()) / s


def hurst(x, min_block: int = HURST_MIN_BLOCK) -> float:
    """Rescaled-range Hurst exponent.

    Block sizes are the powers of two from ``min_block`` to ``n // 2``; the
    estimate is the least-squares slope of log mean(R/S) against log size,
    clipped to [0, 1.5].
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 32:
        raise SeriesTooShort(f"hurst needs at least 32 points, got {n}")
    if np.ptp(x) == 0:
        raise ConstantSeries("hurst is undefined for a constant series")
    sizes, rs = [], []
    size = min_block
    while size <= n // 2:
        blocks = x[: (n // size) * size].reshape(-1, size)
        vals = np.array([rescaled_range(b) for b in blocks])
        vals = vals[np.isfinite(vals)]
        if vals.size:
            sizes.append(size)
            rs.append(vals.mean())
        size *= 2
    if len(sizes) < 2:
        raise ConstantSeries("too few non-constant blocks to fit a slope")
    slope = np.polyfit(np.log(sizes), np.log(rs), 1)[0]
    return float(np.clip(slope, *HURST_RANGE))


@njit(cache=True)
def _dtw_cost(x, y):
    n, m = x.shape[0], y.shape[0]
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d = x[i - 1] - y[j - 1]
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = d * d + best
    return acc[n, m]


def dtw(x, y) -> float:
    """DTW distance: sqrt of the minimal summed squared gap over monotone alignments."""
    x = np.ascontiguousarray(x, dtype=np.float64).ravel()
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise LengthMismatch("dtw needs non-empty sequences")
    return float(np.sqrt(_dtw_cost(x, y)))


def _paired(actual, predicted):
    a = np.asarray(actual, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if a.shape != p.shape:
        raise LengthMismatch(f"actual {a.shape} and predicted {p.shape} differ in shape")
    if a.size == 0:
        raise LengthMismatch("empty input")
    return a, p


def mae(actual, predicted) -> float:
    a, p = _paired(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def mape(actual, predicted, eps: float = 1e-8) -> float:
    """Mean absolute percentage error as a fraction (0.094, not 9.4)."""
    a, p = _paired(actual, predicted)
    if np.any(np.abs(a) < eps):
        raise ZeroActual(f"actual values below {eps} make MAPE undefined")
    return float(np.mean(np.abs((a - p) / a)))


def improvement_rate(baseline: float, ours: float) -> float:
    """Percent by which ``ours`` improves on ``baseline``: 100 (b - o) / b."""
    if baseline == 0:
        raise ZeroBaseline("baseline error is zero")
    return 100.0 * (baseline - ours) / baseline
