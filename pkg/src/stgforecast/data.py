"""Demand panels: CSV loading, synthetic generation, rolling windows, scaling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    InvalidSpec,
    IrregularDates,
    MalformedHeader,
    NegativeValue,
    NonMonotonicDates,
    RaggedRow,
    WindowTooLong,
)

FREQUENCIES = ("daily", "monthly")


def _month_index(ts: np.ndarray) -> np.ndarray:
    return ts.astype("datetime64[M]").astype(np.int64)


def infer_frequency(timestamps: np.ndarray) -> str:
    """Return ``"daily"`` or ``"monthly"`` for evenly spaced day-resolution stamps.

    Raises NonMonotonicDates / IrregularDates with the 1-based data row of the
    first offending stamp.
    """
    ts = np.asarray(timestamps, dtype="datetime64[D]")
    days = np.diff(ts).astype(np.int64)
    bad = np.flatnonzero(days <= 0)
    if bad.size:
        raise NonMonotonicDates(int(bad[0]) + 2)
    if np.all(days == 1):
        return "daily"
    months = np.diff(_month_index(ts))
    same_day = ts - ts.astype("datetime64[M]").astype("datetime64[D]")
    if np.all(months == 1) and np.all(same_day == same_day[0]):
        return "monthly"
    irregular = np.flatnonzero((days != days[0]))
    row = int(irregular[0]) + 2 if irregular.size else 2
    raise IrregularDates(row)


@dataclass(frozen=True)
class TimeSeriesPanel:
    """T x N nonnegative demand matrix with timestamps and region names."""

    values: np.ndarray
    timestamps: np.ndarray
    regions: tuple[str, ...]
    frequency: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype="datetime64[D]")
        regions = tuple(str(r) for r in self.regions)
        if values.ndim != 2:
            raise InvalidSpec(f"values must be 2-D, got shape {values.shape}")
        T, N = values.shape
        if T < 2 or N < 2:
            raise InvalidSpec(f"panel needs T >= 2 and N >= 2, got T={T}, N={N}")
        if ts.shape != (T,):
            raise InvalidSpec(f"expected {T} timestamps, got {ts.shape[0]}")
        if len(regions) != N:
            raise InvalidSpec(f"expected {N} region names, got {len(regions)}")
        if len(set(regions)) != N:
            raise InvalidSpec("region names must be unique")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            r, c = np.argwhere(~np.isfinite(values) | (values < 0))[0]
            raise NegativeValue(int(r) + 1, regions[c], values[r, c])
        if self.frequency not in FREQUENCIES:
            raise InvalidSpec(f"unknown frequency {self.frequency!r}")
        if infer_frequency(ts) != self.frequency:
            raise IrregularDates(2, f"timestamps are not {self.frequency}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "regions", regions)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def rows(self, start: int, stop: int) -> "TimeSeriesPanel":
        return TimeSeriesPanel(self.values[start:stop], self.timestamps[start:stop],
                               self.regions, self.frequency)

    def with_values(self, values: np.ndarray) -> "TimeSeriesPanel":
        return TimeSeriesPanel(values, self.timestamps, self.regions, self.frequency)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", *self.regions])
            for ts, row in zip(self.timestamps, self.values):
                w.writerow([str(ts), *(repr(float(v)) for v in row)])


def load_csv(path) -> TimeSeriesPanel:
    """Read a ``date,<region1>,...`` CSV into a panel.

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeader(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 3 or header[0].lower() != "date":
        raise MalformedHeader(f"{path}: header must be 'date' followed by >= 2 region names",
                              column=0)
    regions = header[1:]
    for j, name in enumerate(regions, start=1):
        if not name:
            raise MalformedHeader(f"{path}: empty region name in column {j}", column=j)
        if name in regions[: j - 1]:
            raise MalformedHeader(f"{path}: duplicate region name {name!r}", column=j)

    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    dates = []
    values = np.empty((len(body), len(regions)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise RaggedRow(i, len(header), len(row))
        try:
            dates.append(np.datetime64(row[0].strip(), "D"))
        except ValueError as exc:
            raise NonMonotonicDates(i, f"row {i}: unparseable date {row[0]!r}") from exc
        for j, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise NegativeValue(i, regions[j], cell) from None
            if not math.isfinite(v) or v < 0:
                raise NegativeValue(i, regions[j], cell)
            values[i - 1, j] = v
    if len(body) < 2:
        raise InvalidSpec(f"{path}: need at least 2 data rows, got {len(body)}")
    ts = np.array(dates, dtype="datetime64[D]")
    return TimeSeriesPanel(values, ts, tuple(regions), infer_frequency(ts))


# --- synthetic panels -----------------------------------------------------

@dataclass
class SynthSpec:
    """Parameters of the synthetic generator.

    Scalar fields broadcast to every region; list fields give one value per
    region. ``phases`` defaults to evenly spaced offsets and ``loadings`` to a
    linear ramp from 0.5 to 1.5.
    """

    level: float | list[float] = 100.0
    period: int = 7
    amplitude: float | list[float] = 20.0
    phases: list[float] | None = None
    loadings: float | list[float] | None = None
    factor_scale: float = 5.0
    phi: float = 0.8
    noise_scale: float = 2.0
    start: str = "2017-01-01"
    frequency: str = "daily"

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpec(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**d)


def _per_region(value, n: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)) if np.ndim(value) == 0 \
        else np.asarray(value, dtype=np.float64)
    if arr.shape != (n,):
        raise InvalidSpec(f"{name} needs {n} entries, got {arr.shape}")
    return arr.copy()


def _ar1(rng: np.random.Generator, phi: float, scale: float, shape: tuple[int, ...]) -> np.ndarray:
    shocks = rng.standard_normal(shape) * scale
    out = np.empty(shape)
    out[0] = shocks[0] / math.sqrt(1.0 - phi * phi)
    for t in range(1, shape[0]):
        out[t] = phi * out[t - 1] + shocks[t]
    return out


def _calendar(start: str, n: int, frequency: str) -> np.ndarray:
    first = np.datetime64(start, "D")
    if frequency == "daily":
        return first + np.arange(n)
    if frequency == "monthly":
        months = first.astype("datetime64[M]") + np.arange(n)
        offset = first - first.astype("datetime64[M]").astype("datetime64[D]")
        return months.astype("datetime64[D]") + offset
    raise InvalidSpec(f"unknown frequency {frequency!r}")


def synth_panel(n_regions: int, n_steps: int, seed: int, spec: SynthSpec | None = None) -> TimeSeriesPanel:
    """Seasonal + shared AR(1) factor + AR(1) noise panel, clipped at zero."""
    spec = spec or SynthSpec()
    if n_regions < 2:
        raise InvalidSpec("n_regions must be >= 2")
    if spec.period < 1 or n_steps < 4 * spec.period:
        raise InvalidSpec(f"n_steps must be >= 4 * period ({4 * spec.period})")
    if not 0.0 <= spec.phi < 1.0:
        raise InvalidSpec(f"phi must lie in [0, 1), got {spec.phi}")
    if spec.noise_scale < 0 or spec.factor_scale < 0:
        raise InvalidSpec("noise_scale and factor_scale must be nonnegative")
    level = _per_region(spec.level, n_regions, "level")
    amp = _per_region(spec.amplitude, n_regions, "amplitude")
    if np.any(amp < 0):
        raise InvalidSpec("amplitudes must be nonnegative")
    phases = (2 * np.pi * np.arange(n_regions) / n_regions if spec.phases is None
              else _per_region(spec.phases, n_regions, "phases"))
    loadings = (np.linspace(0.5, 1.5, n_regions) if spec.loadings is None
                else _per_region(spec.loadings, n_regions, "loadings"))

    rng = np.random.default_rng(seed)
    factor = _ar1(rng, spec.phi, spec.factor_scale, (n_steps,))
    noise = _ar1(rng, spec.phi, spec.noise_scale, (n_steps, n_regions))
    t = np.arange(n_steps)[:, None]
    values = (level + amp * np.sin(2 * np.pi * t / spec.period + phases)
              + loadings * factor[:, None] + noise)
    values = np.clip(values, 0.0, None)
    regions = tuple(f"region_{i}" for i in range(n_regions))
    return TimeSeriesPanel(values, _calendar(spec.start, n_steps, spec.frequency), regions,
                           spec.frequency)


# --- windows --------------------------------------------------------------

@dataclass
class ScaleParams:
    """Per-region affine map ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if self.constant is None:
            self.constant = np.zeros(self.shift.shape, dtype=bool)
        self.constant = np.asarray(self.constant, dtype=bool)
        if np.any(self.scale <= 0):
            raise InvalidSpec("scale must be positive for every region")

    def __eq__(self, other):
        return (isinstance(other, ScaleParams)
                and np.array_equal(self.shift, other.shift)
                and np.array_equal(self.scale, other.scale)
                and np.array_equal(self.constant, other.constant))


@dataclass
class WindowBatch:
    history: np.ndarray          # B x Q x N x 1
    horizon: np.ndarray          # B x P x N
    anchors: list[int]           # index of the last history row of each window
    scale_params: ScaleParams | None = None

    def __len__(self):
        return self.history.shape[0]

    @property
    def q(self) -> int:
        return self.history.shape[1]

    @property
    def p(self) -> int:
        return self.horizon.shape[1]


def window_arrays(values: np.ndarray, q: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Stride-1 (history, horizon) views of a T x N array: (B, q, N), (B, p, N)."""
    T = values.shape[0]
    if q < 1 or p < 1:
        raise WindowTooLong(f"q and p must be >= 1, got q={q}, p={p}")
    if q + p > T:
        raise WindowTooLong(f"q + p = {q + p} exceeds series length T = {T}")
    win = np.lib.stride_tricks.sliding_window_view(values, q + p, axis=0)  # B, N, q+p
    win = np.moveaxis(win, -1, 1)
    return win[:, :q], win[:, q:]


def make_windows(panel: TimeSeriesPanel, q: int, p: int) -> WindowBatch:
    if q < 2:
        raise WindowTooLong(f"history length q must be >= 2, got {q}")
    hist, hor = window_arrays(panel.values, q, p)
    anchors = list(range(q - 1, q - 1 + hist.shape[0]))
    return WindowBatch(np.ascontiguousarray(hist)[..., None], np.ascontiguousarray(hor), anchors)


def split_rows(T: int, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[slice, slice, slice]:
    """Chronological train / validation / test row ranges."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidSpec(f"split fractions must be three nonnegatives summing to 1, got {fractions}")
    a = int(round(T * fractions[0]))
    b = int(round(T * (fractions[0] + fractions[1])))
    return slice(0, a), slice(a, b), slice(b, T)


# --- scaling --------------------------------------------------------------

def fit_scale(panel: TimeSeriesPanel | np.ndarray) -> ScaleParams:
    """Per-region min-max parameters. Pass training rows only.

    A region whose minimum equals its maximum gets ``scale = 1`` and is
    flagged in ``ScaleParams.constant``.
    """
    values = panel.values if isinstance(panel, TimeSeriesPanel) else np.asarray(panel, float)
    lo = values.min(axis=0)
    span = values.max(axis=0) - lo
    constant = span <= 0
    return ScaleParams(lo, np.where(constant, 1.0, span), constant)


def _affine(x, params: ScaleParams, forward: bool):
    if isinstance(x, WindowBatch):
        hist = _affine(x.history[..., 0], params, forward)[..., None]
        return WindowBatch(hist, _affine(x.horizon, params, forward), list(x.anchors), params)
    if isinstance(x, TimeSeriesPanel):
        # scaled values can leave the nonnegative panel domain
        return _affine(x.values, params, forward)
    x = np.asarray(x, dtype=np.float64)
    if forward:
        return (x - params.shift) / params.scale
    return x * params.scale + params.shift


def apply_scale(x, params: ScaleParams):
    """Scale a WindowBatch, panel, or array whose last axis indexes regions."""
    return _affine(x, params, True)


def invert_scale(x, params: ScaleParams):
    return _affine(x, params, False)
