"""Rolling-window backtests against naive baselines, sample quality, and reports."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from .data import TimeSeriesPanel, apply_scale, invert_scale, split_rows, window_arrays
from .errors import IncompatibleCheckpoint, InvalidSpec, SeasonTooLong, ZeroBaseline
from .metrics import dtw, hurst, improvement_rate

BASELINES = ("seasonal_naive", "persistence")
MODELS = ("ours",) + BASELINES
# slots for externally computed benchmark errors, merged with merge_external
EXTERNAL_SLOTS = ("ARIMA", "ETS", "LSTM", "Informer", "STAC", "ST-FGCN")
DEFAULT_SEASON = {"daily": 7, "monthly": 12}
DEFAULT_HORIZONS = {"daily": (1, 3, 5, 14), "monthly": (1, 3, 6, 12)}
REPORT_VERSION = 1

Forecaster = Callable[[np.ndarray], np.ndarray]


def seasonal_naive(history, season: int, p: int) -> np.ndarray:
    """Repeat the last observed season: y_hat[t+h] = y[t + h - season * ceil(h / season)].

    ``history`` is (q,) or (..., q, N) with time on axis -2 for 2-D+ input.
    """
    x = np.asarray(history, dtype=np.float64)
    axis = 0 if x.ndim == 1 else -2
    q = x.shape[axis]
    if season < 1:
        raise InvalidSpec(f"season must be >= 1, got {season}")
    if season > q:
        raise SeasonTooLong(f"season {season} exceeds history length {q}")
    h = np.arange(1, p + 1)
    idx = q - 1 + h - season * np.ceil(h / season).astype(int)
    return np.take(x, idx, axis=axis)


def persistence(history, p: int) -> np.ndarray:
    return seasonal_naive(history, 1, p)


@dataclass
class BacktestPlan:
    q: int
    p: int
    horizons: tuple[int, ...] = (1,)
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    models: tuple[str, ...] = MODELS
    season: int | None = None
    # train one model per horizon instead of reading prefixes of one p-step head
    retrain_per_horizon: bool = False

    def __post_init__(self):
        self.horizons = tuple(int(h) for h in self.horizons)
        self.split = tuple(float(f) for f in self.split)
        self.models = tuple(self.models)
        if not self.horizons or min(self.horizons) < 1 or max(self.horizons) > self.p:
            raise InvalidSpec(f"horizons {self.horizons} must lie in [1, p={self.p}]")
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise InvalidSpec(f"split fractions {self.split} must be three nonnegative numbers summing to 1")
        unknown = set(self.models) - set(MODELS)
        if unknown or "ours" not in self.models:
            raise InvalidSpec(f"models must include 'ours' and come from {MODELS}; got {self.models}")
        if self.season is not None and self.season < 1:
            raise InvalidSpec("season must be >= 1")

    @classmethod
    def for_frequency(cls, frequency: str, q: int, p: int | None = None, **kw) -> "BacktestPlan":
        horizons = DEFAULT_HORIZONS[frequency]
        p = p or max(horizons)
        return cls(q=q, p=p, horizons=tuple(h for h in horizons if h <= p), **kw)


def test_windows(panel: TimeSeriesPanel, plan: BacktestPlan) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(histories, horizons, anchor rows) of all windows lying inside the test segment."""
    te = split_rows(panel.T, plan.split)[2]
    n = te.stop - te.start
    if n < plan.q + plan.p:
        raise InvalidSpec(f"test segment has {n} rows; need q + p = {plan.q + plan.p}")
    hist, hor = window_arrays(panel.values[te], plan.q, plan.p)
    anchors = np.arange(hist.shape[0]) + te.start + plan.q - 1
    return hist, hor, anchors


def checkpoint_forecaster(cp) -> Forecaster:
    """Unscaled (B, q, N) histories -> unscaled (B, p, N) forecasts from a trained checkpoint."""
    from .train import build_predictor, predict

    if cp is None or cp.meta.get("phase") in (None, "init"):
        raise IncompatibleCheckpoint("no trained predictor: run pretrain or train first")
    pred = build_predictor(cp)
    scale = cp.scale
    return lambda hist: invert_scale(predict(pred, apply_scale(hist, scale)), scale)


def _window_errors(actual: np.ndarray, forecast: np.ndarray, h: int):
    """Per-window, per-region MAE and MAPE over steps 1..h -> two (B, N) arrays."""
    a, f = actual[:, :h], forecast[:, :h]
    err = np.abs(a - f)
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = np.where(a != 0, err / np.abs(a), np.nan)
    return err.mean(axis=1), pct.mean(axis=1)


def _ir(baseline, ours):
    if baseline is None or ours is None or not math.isfinite(baseline) or not math.isfinite(ours):
        return None
    try:
        return improvement_rate(baseline, ours)
    except ZeroBaseline:
        return None


def _none_if_nan(x: float):
    return None if x is None or not math.isfinite(x) else float(x)


@dataclass
class MetricReport:
    """Backtest results. Horizon keys are strings ("1", "3", ...) so the JSON is stable.

    ``models[m]["per_region"][region][h]`` is the mean over test windows of that
    region's window error; ``aggregate`` averages the per-region values, and
    ``per_window`` keeps each window's error averaged over regions.
    """

    meta: dict
    models: dict
    improvement: dict
    external: dict = field(default_factory=lambda: {name: None for name in EXTERNAL_SLOTS})
    quality: dict | None = None
    version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls.from_dict(json.loads(text))

    def aggregate(self, model: str, h: int, metric: str = "mape"):
        return self.models[model]["aggregate"][str(h)][metric]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "horizon", "model", "mae", "mape"])
        for model in sorted(self.models):
            block = self.models[model]
            for h in self.meta["horizons"]:
                for region in self.meta["regions"]:
                    e = block["per_region"][region][str(h)]
                    w.writerow([region, h, model, e["mae"], e["mape"]])
                e = block["aggregate"][str(h)]
                w.writerow(["ALL", h, model, e["mae"], e["mape"]])
        return buf.getvalue()

    def validate(self) -> None:
        """Check against the bundled JSON schema (raises jsonschema.ValidationError)."""
        import jsonschema

        jsonschema.validate(json.loads(self.to_json()), report_schema())


def report_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("report_schema.json").read_text())


def _model_block(actual, forecast, horizons, regions) -> dict:
    per_region = {r: {} for r in regions}
    aggregate, per_window = {}, {}
    for h in horizons:
        mae_w, mape_w = _window_errors(actual, forecast, h)
        key = str(h)
        for j, r in enumerate(regions):
            per_region[r][key] = {"mae": float(mae_w[:, j].mean()),
                                  "mape": _none_if_nan(float(mape_w[:, j].mean()))}
        aggregate[key] = {"mae": float(mae_w.mean(axis=0).mean()),
                          "mape": _none_if_nan(float(mape_w.mean(axis=0).mean()))}
        per_window[key] = {"mae": [float(v) for v in mae_w.mean(axis=1)],
                           "mape": [_none_if_nan(float(v)) for v in mape_w.mean(axis=1)]}
    return {"per_region": per_region, "aggregate": aggregate, "per_window": per_window}


def _improvements(models: dict, external: dict, horizons) -> dict:
    ours = models["ours"]["aggregate"]
    out = {}
    refs = {m: models[m]["aggregate"] for m in models if m != "ours"}
    refs.update({name: ext for name, ext in external.items() if ext})
    for name, agg in sorted(refs.items()):
        out[f"ours_vs_{name}"] = {
            str(h): {metric: _ir((agg.get(str(h)) or {}).get(metric), ours[str(h)][metric])
                     for metric in ("mae", "mape")}
            for h in horizons}
    return out


def backtest(panel: TimeSeriesPanel, plan: BacktestPlan, checkpoint=None, *,
             forecaster: Forecaster | None = None, train_fn=None) -> MetricReport:
    """Score every test-segment window for each model in the plan.

    ``forecaster`` replaces the checkpoint's predictor (used to inject any model
    as "ours"). With ``plan.retrain_per_horizon`` a separate predictor with
    p = h is trained (via ``train_fn(panel, config)``) for every horizon h.
    """
    hist, hor, anchors = test_windows(panel, plan)
    season = plan.season or DEFAULT_SEASON[panel.frequency]
    regions = list(panel.regions)
    forecasts = {}
    if forecaster is None:
        if checkpoint is None:
            raise IncompatibleCheckpoint("no trained predictor: run pretrain or train first")
        _check_compatible(checkpoint, panel, plan)
    if plan.retrain_per_horizon and forecaster is None:
        forecasts["ours"] = _per_horizon_forecasts(panel, plan, checkpoint, hist, train_fn)
    else:
        f = forecaster or checkpoint_forecaster(checkpoint)
        forecasts["ours"] = np.asarray(f(hist), dtype=np.float64)[:, :plan.p]
    if "seasonal_naive" in plan.models:
        forecasts["seasonal_naive"] = seasonal_naive(hist, season, plan.p)
    if "persistence" in plan.models:
        forecasts["persistence"] = persistence(hist, plan.p)
    models = {m: _model_block(hor, forecasts[m], plan.horizons, regions) for m in plan.models}
    meta = {"q": plan.q, "p": plan.p, "horizons": list(plan.horizons), "split": list(plan.split),
            "season": season, "frequency": panel.frequency, "regions": regions,
            "n_windows": int(hist.shape[0]), "first_anchor": int(anchors[0]),
            "last_anchor": int(anchors[-1]), "retrain_per_horizon": plan.retrain_per_horizon}
    external = {name: None for name in EXTERNAL_SLOTS}
    return MetricReport(meta, models, _improvements(models, external, plan.horizons), external)


def _check_compatible(cp, panel: TimeSeriesPanel, plan: BacktestPlan) -> None:
    if cp.meta.get("phase") in (None, "init"):
        raise IncompatibleCheckpoint("checkpoint holds an untrained predictor")
    cfg = cp.config
    if cfg["q"] != plan.q:
        raise IncompatibleCheckpoint(f"checkpoint q={cfg['q']} but plan q={plan.q}")
    if not plan.retrain_per_horizon and cfg["p"] < max(plan.horizons):
        raise IncompatibleCheckpoint(f"checkpoint p={cfg['p']} is shorter than horizon {max(plan.horizons)}")
    if list(cp.regions) != list(panel.regions):
        raise IncompatibleCheckpoint("checkpoint regions differ from the panel's")


def _per_horizon_forecasts(panel, plan, checkpoint, hist, train_fn) -> np.ndarray:
    from .train import ExperimentConfig, train

    train_fn = train_fn or (lambda pnl, cfg: train(pnl, cfg))
    out = np.full((hist.shape[0], plan.p, hist.shape[2]), np.nan)
    for h in plan.horizons:
        d = copy.deepcopy(checkpoint.config)
        d["p"] = h
        d["predictor"]["p"] = h
        cp_h = train_fn(panel, ExperimentConfig.from_dict(d))
        # the h-step model fills steps 1..h; the report reads the prefix up to h
        out[:, :h] = checkpoint_forecaster(cp_h)(hist)[:, :h]
    if np.isnan(out[:, :max(plan.horizons)]).any():
        raise IncompatibleCheckpoint("per-horizon models do not cover every evaluated step")
    return out


def merge_external(report: MetricReport, name: str, errors: dict) -> MetricReport:
    """Add externally computed aggregates {h: {"mae": .., "mape": ..}} and recompute IR."""
    if name not in report.external:
        raise KeyError(f"unknown external slot {name!r}; slots are {sorted(report.external)}")
    out = MetricReport.from_dict(report.to_dict())
    out.external[name] = {str(h): {"mae": _none_if_nan(v.get("mae")), "mape": _none_if_nan(v.get("mape"))}
                          for h, v in errors.items()}
    out.improvement = _improvements(out.models, out.external, out.meta["horizons"])
    return out


# --- sample quality -------------------------------------------------------

def sample_quality(real, virtual, regions: Sequence[str] | None = None) -> dict:
    """Hurst exponents of real vs virtual data and DTW to the nearest real window.

    ``real`` is (K, q, N) and ``virtual`` (M, q, N). Hurst is estimated per
    region on the windows laid end to end; DTW is, per region, the mean over
    virtual windows of the distance to the closest real window.
    """
    real = np.asarray(real, dtype=np.float64)
    virtual = np.asarray(virtual, dtype=np.float64)
    if real.ndim == 2:
        real = real[None]
    if virtual.ndim == 2:
        virtual = virtual[None]
    if real.shape[0] < 1 or virtual.shape[0] < 1 or real.shape[2] != virtual.shape[2]:
        raise InvalidSpec(f"need >= 1 window each with matching regions: {real.shape} vs {virtual.shape}")
    n = real.shape[2]
    regions = list(regions) if regions is not None else [f"region_{j}" for j in range(n)]
    out = {}
    for j, r in enumerate(regions):
        dists = [min(dtw(v[:, j], w[:, j]) for w in real) for v in virtual]
        out[r] = {"hurst_real": hurst(real[:, :, j].ravel()),
                  "hurst_virtual": hurst(virtual[:, :, j].ravel()),
                  "dtw": float(np.mean(dists))}
    return {"regions": out,
            "mean_dtw": float(np.mean([v["dtw"] for v in out.values()])),
            "mean_hurst_gap": float(np.mean([abs(v["hurst_real"] - v["hurst_virtual"])
                                             for v in out.values()]))}


def virtual_windows(cp, panel: TimeSeriesPanel, seed: int = 0, segment: str = "train",
                    clip: bool = False):
    """Non-overlapping real windows of one segment and generator samples conditioned
    on the window before each; both returned unscaled as (K, q, N).

    ``clip`` limits generator output to the scaled [0, 1] range before unscaling,
    as done for exported samples.
    """
    import torch

    from .train import build_gan

    if cp is None or cp.meta.get("phase") in (None, "init"):
        raise IncompatibleCheckpoint("no trained generator in checkpoint")
    cfg = cp.config
    q = cfg["q"]
    rows = dict(zip(("train", "val", "test"), split_rows(panel.T, cfg["split"])))[segment]
    scaled = apply_scale(panel.values, cp.scale)
    starts = np.arange(max(rows.start, q), rows.stop - q + 1, q)
    if starts.size == 0:
        raise InvalidSpec(f"{segment} segment too short for a conditioned window of length {q}")
    real = np.stack([scaled[s:s + q] for s in starts])
    cond = np.stack([scaled[s - q:s] for s in starts])
    from .spatial import batch_weights

    weights = batch_weights(real, cfg["gan"]["normalization"])
    gan = build_gan(cp)
    gen = torch.Generator().manual_seed(seed)
    dtype = next(gan.generator.parameters()).dtype
    c = torch.as_tensor(cond, dtype=dtype)
    with torch.no_grad():
        z = torch.randn(c.shape, generator=gen, dtype=dtype)
        fake = gan.generator(z, c, torch.as_tensor(weights, dtype=dtype)).double().numpy()
    if clip:
        fake = np.clip(fake, 0.0, 1.0)
    return invert_scale(real, cp.scale), invert_scale(fake, cp.scale)
