"""Rolling-window correlation graphs between regions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, ShapeMismatch

NORMALIZATIONS = ("affine", "abs", "sym")


class DegenerateVariance(UserWarning):
    """A series is constant over the window, so its correlation is set to 0."""


@dataclass(frozen=True)
class SpatialWeights:
    raw: np.ndarray
    normalized: np.ndarray
    window_anchor: int | None
    window_len: int
    degenerate: tuple[bool, ...] = ()


def pearson_window(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"series shapes differ: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise LengthMismatch("window length must be >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    nx = np.sqrt(dx @ dx)
    ny = np.sqrt(dy @ dy)
    if nx == 0 or ny == 0:
        warnings.warn("zero-variance series in correlation window", DegenerateVariance,
                      stacklevel=2)
        return 0.0
    return float(np.clip((dx @ dy) / (nx * ny), -1.0, 1.0))


def _correlation(history: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson matrices for (..., Q, N) windows plus a (..., N) degenerate mask."""
    centered = history - history.mean(axis=-2, keepdims=True)
    norms = np.sqrt(np.einsum("...qn,...qn->...n", centered, centered))
    # relative threshold: rounding in the mean leaves ~1e-16 residue on constant columns
    scale = np.abs(history).max(axis=-2) + 1.0
    degenerate = norms <= 1e-12 * scale * np.sqrt(history.shape[-2])
    safe = np.where(degenerate, 1.0, norms)
    unit = centered / safe[..., None, :]
    unit = np.where(degenerate[..., None, :], 0.0, unit)
    raw = np.einsum("...qi,...qj->...ij", unit, unit)
    raw = np.clip(raw, -1.0, 1.0)
    raw = 0.5 * (raw + np.swapaxes(raw, -1, -2))
    n = history.shape[-1]
    diag = np.where(degenerate, 0.0, 1.0)
    raw[..., np.arange(n), np.arange(n)] = diag
    return raw, degenerate


def build_weights(history) -> np.ndarray:
    """Raw N x N Pearson matrix of a Q x N window (constant columns give zero rows)."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 3 and history.shape[-1] == 1:
        history = history[..., 0]
    if history.ndim != 2 or history.shape[0] < 2 or history.shape[1] < 2:
        raise ShapeMismatch(f"expected a Q x N window with Q, N >= 2, got {history.shape}")
    return _correlation(history)[0]


def normalize_weights(raw, method: str = "affine") -> np.ndarray:
    """Map correlations to a nonnegative mixing matrix.

    ``affine`` (default): s = (a + 1) / 2, then divide each row by its sum.
    ``abs``: |a| row-normalized. ``sym``: D^-1/2 |A| D^-1/2 (not row-stochastic).
    Rows that sum to zero become a self-loop.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != raw.shape[-2]:
        raise ShapeMismatch(f"weights must be square, got {raw.shape}")
    if method == "affine":
        s = (raw + 1.0) / 2.0
    elif method in ("abs", "sym"):
        s = np.abs(raw)
    else:
        raise ValueError(f"unknown normalization {method!r}; choose from {NORMALIZATIONS}")
    n = raw.shape[-1]
    eye = np.eye(n)
    rowsum = s.sum(axis=-1, keepdims=True)
    empty = rowsum <= 0
    s = np.where(empty, eye, s)
    rowsum = np.where(empty, 1.0, rowsum)
    if method == "sym":
        d = 1.0 / np.sqrt(rowsum)
        return d * s * np.swapaxes(d, -1, -2)
    return s / rowsum


def spatial_weights(history, anchor: int | None = None, method: str = "affine") -> SpatialWeights:
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 3 and history.shape[-1] == 1:
        history = history[..., 0]
    if history.ndim != 2:
        raise ShapeMismatch(f"expected a Q x N window, got {history.shape}")
    raw, degenerate = _correlation(history)
    return SpatialWeights(raw, normalize_weights(raw, method), anchor, history.shape[0],
                          tuple(bool(d) for d in degenerate))


def batch_weights(histories, method: str = "affine") -> np.ndarray:
    """Normalized weights for a stack of (B, Q, N) windows -> (B, N, N)."""
    histories = np.asarray(histories, dtype=np.float64)
    if histories.ndim == 4:
        histories = histories[..., 0]
    raw, _ = _correlation(histories)
    return normalize_weights(raw, method)
