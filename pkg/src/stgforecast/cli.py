"""Command-line entry point: synth, pretrain, train, generate, evaluate, report.

Configuration precedence, lowest to highest: built-in defaults, the TOML file
given with ``--config``, the STGAN_SEED environment variable (run.seed), then
command-line flags (``--set section.key=value``, ``--seed``, ``--desk-scale``,
``--deterministic`` / ``--no-deterministic``). ``run.desk_scale`` swaps in the
small predictor and GAN widths after all layers are merged.

Exit codes: 0 success, 1 configuration error (the message names the key),
2 runtime error (the message names the error class).
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import tomli
from filelock import FileLock, Timeout

from . import bench, train as trainmod
from .data import SynthSpec, TimeSeriesPanel, load_csv, split_rows, synth_panel
from .errors import ConfigError, ConstantSeries, DirectoryLocked, ForecastError, IncompatibleCheckpoint, SeriesTooShort
from .predictor import PredictorConfig
from .stgan import GanConfig
from .train import ExperimentConfig, TrainConfig

log = logging.getLogger("stgforecast")

SUBCOMMANDS = ("synth", "pretrain", "train", "generate", "evaluate", "report")
_MODEL_FIELDS = {"q", "p"}


def default_config() -> dict:
    spec = {k: v for k, v in asdict(SynthSpec()).items() if v is not None}
    return {
        "paths": {"data": "data/panel.csv", "checkpoint_dir": "runs/checkpoints",
                  "report_dir": "runs/reports", "virtual_dir": "runs/virtual"},
        "synth": {"n_regions": 4, "n_steps": 1000, "phases": None, "loadings": None, **spec},
        "window": {"q": 90, "p": 1, "split": [0.7, 0.1, 0.2]},
        "predictor": {k: v for k, v in asdict(PredictorConfig()).items() if k not in _MODEL_FIELDS},
        "gan": asdict(GanConfig()),
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in asdict(TrainConfig()).items() if k != "seed"},
        "backtest": {"horizons": [1], "season": None, "models": list(bench.MODELS),
                     "retrain_per_horizon": False},
        "run": {"seed": 0, "deterministic": True, "desk_scale": False, "checkpoint_every": 0},
    }


def _check_type(key: str, default, value):
    if default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def merge(base: dict, layer: dict, source: str = "config") -> dict:
    """Overlay ``layer`` on ``base``; unknown sections or keys are errors."""
    out = copy.deepcopy(base)
    defaults = default_config()
    for section, values in layer.items():
        if section not in defaults:
            raise ConfigError(section, f"unknown section in {source}")
        if not isinstance(values, dict):
            raise ConfigError(section, f"expected a table in {source}")
        for key, value in values.items():
            path = f"{section}.{key}"
            if key not in defaults[section]:
                raise ConfigError(path, f"unknown key in {source}")
            out[section][key] = _check_type(path, defaults[section][key], value)
    return out


def parse_assignment(text: str) -> dict:
    """``section.key=value`` with a TOML value (bare words are taken as strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(text, "overrides must look like section.key=value")
    path, raw = text.split("=", 1)
    section, key = path.strip().split(".", 1)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return {section: {key: value}}


def resolve_config(path=None, overrides=(), env=None, seed=None, desk_scale=None,
                   deterministic=None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                cfg = merge(cfg, tomli.load(fh), str(path))
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError("--config", f"invalid TOML: {exc}") from None
    env = os.environ if env is None else env
    if env.get("STGAN_SEED"):
        try:
            cfg["run"]["seed"] = int(env["STGAN_SEED"])
        except ValueError:
            raise ConfigError("STGAN_SEED", f"not an integer: {env['STGAN_SEED']!r}") from None
    for item in overrides:
        cfg = merge(cfg, parse_assignment(item), "--set")
    if seed is not None:
        cfg["run"]["seed"] = seed
    if desk_scale is not None:
        cfg["run"]["desk_scale"] = desk_scale
    if deterministic is not None:
        cfg["run"]["deterministic"] = deterministic
    if cfg["run"]["desk_scale"]:
        desk_p = PredictorConfig().desk_scale()
        for k in ("d_model", "n_heads", "n_layers", "d_ffn"):
            cfg["predictor"][k] = getattr(desk_p, k)
        cfg["gan"].update({k: v for k, v in asdict(GanConfig().desk_scale()).items() if k != "normalization"})
    experiment(cfg)
    backtest_plan(cfg)
    return cfg


def _build(section: str, fn):
    try:
        return fn()
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(section, str(exc)) from None


def experiment(cfg: dict) -> ExperimentConfig:
    w = cfg["window"]

    def make():
        pred = _build("predictor", lambda: PredictorConfig(q=w["q"], p=w["p"], **cfg["predictor"]))
        gan = _build("gan", lambda: GanConfig(**cfg["gan"]))
        tc = _build("train", lambda: TrainConfig(seed=cfg["run"]["seed"], **cfg["train"]))
        return ExperimentConfig(q=w["q"], p=w["p"], split=tuple(w["split"]), predictor=pred, gan=gan,
                                train=tc, deterministic=cfg["run"]["deterministic"])

    return _build("window", make)


def backtest_plan(cfg: dict) -> bench.BacktestPlan:
    b, w = cfg["backtest"], cfg["window"]
    return _build("backtest", lambda: bench.BacktestPlan(
        q=w["q"], p=w["p"], horizons=tuple(b["horizons"]), split=tuple(w["split"]),
        models=tuple(b["models"]), season=b["season"], retrain_per_horizon=b["retrain_per_horizon"]))


def synth_spec(cfg: dict) -> SynthSpec:
    s = {k: v for k, v in cfg["synth"].items() if k not in ("n_regions", "n_steps")}
    return _build("synth", lambda: SynthSpec.from_dict(s))


# --- helpers ----------------------------------------------------------------

class KeyValueFormatter(logging.Formatter):
    """``ts=... level=... phase=... iter=... <loss>=... msg="..."`` on one line."""

    def format(self, record):
        parts = [f"ts={self.formatTime(record, '%Y-%m-%dT%H:%M:%S')}", f"level={record.levelname}"]
        for key in ("phase", "iter"):
            if hasattr(record, key):
                parts.append(f"{key}={getattr(record, key)}")
        for k, v in sorted(getattr(record, "losses", {}).items()):
            parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
        parts.append(f"msg={json.dumps(record.getMessage())}")
        return " ".join(parts)


def _setup_logging(level: str):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level.upper())
    log.propagate = False


@contextlib.contextmanager
def locked(directory):
    """Exclusive ownership of an output directory for the duration of a run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory / ".stgforecast.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise DirectoryLocked(f"{directory} is in use by another run") from None
    try:
        yield directory
    finally:
        lock.release()


def _panel(cfg) -> TimeSeriesPanel:
    return load_csv(cfg["paths"]["data"])


def _find_checkpoint(cfg, explicit=None):
    if explicit:
        return trainmod.load_checkpoint(explicit)
    d = Path(cfg["paths"]["checkpoint_dir"])
    for name in ("final.ckpt", "pretrained.ckpt"):
        if (d / name).exists():
            return trainmod.load_checkpoint(d / name)
    raise IncompatibleCheckpoint(f"no checkpoint in {d}: run pretrain or train first")


# --- subcommands --------------------------------------------------------------

def cmd_synth(cfg, args):
    s = cfg["synth"]
    panel = synth_panel(s["n_regions"], s["n_steps"], cfg["run"]["seed"], synth_spec(cfg))
    out = Path(cfg["paths"]["data"])
    with locked(out.parent):
        panel.to_csv(out)
    log.info(f"wrote {panel.T} x {panel.N} panel to {out}", extra={"phase": "synth"})


def cmd_pretrain(cfg, args):
    panel = _panel(cfg)
    with locked(cfg["paths"]["checkpoint_dir"]) as d:
        cp = trainmod.pretrain_predictor(panel, experiment(cfg))
        trainmod.save_checkpoint(cp, d / "pretrained.ckpt")
    log.info(f"wrote {d / 'pretrained.ckpt'}", extra={"phase": "pretrain", "iter": cp.meta["epoch"]})


def cmd_train(cfg, args):
    panel = _panel(cfg)
    exp = experiment(cfg)
    with locked(cfg["paths"]["checkpoint_dir"]) as d:
        resume = None
        if args.resume:
            resume = trainmod.load_checkpoint(args.resume)
        elif (d / "pretrained.ckpt").exists():
            resume = trainmod.load_checkpoint(d / "pretrained.ckpt")
        cp = trainmod.train(panel, exp, resume=resume, checkpoint_dir=d,
                            checkpoint_every=cfg["run"]["checkpoint_every"])
    log.info(f"wrote {d / 'final.ckpt'}", extra={"phase": "train", "iter": cp.meta["iter"]})


def _quality(cp, panel, seed):
    real, virtual = bench.virtual_windows(cp, panel, seed=seed, clip=True)
    try:
        return bench.sample_quality(real, virtual, panel.regions), real, virtual
    except (SeriesTooShort, ConstantSeries) as exc:
        log.warning(f"sample quality skipped: {type(exc).__name__}: {exc}", extra={"phase": "quality"})
        return None, real, virtual


def cmd_generate(cfg, args):
    panel = _panel(cfg)
    cp = _find_checkpoint(cfg, args.checkpoint)
    if cp.phase != "done":
        raise IncompatibleCheckpoint("generator is untrained: run train first")
    quality, real, virtual = _quality(cp, panel, cfg["run"]["seed"])
    q = cp.config["q"]
    tr = split_rows(panel.T, cp.config["split"])[0]
    starts = np.arange(max(tr.start, q), tr.stop - q + 1, q)
    with locked(cfg["paths"]["virtual_dir"]) as d:
        for k, s in enumerate(starts):
            # clipped to the scaled [0, 1] range; the max guards rounding below zero
            TimeSeriesPanel(np.maximum(virtual[k], 0.0), panel.timestamps[s:s + q],
                            panel.regions, panel.frequency).to_csv(d / f"virtual_{k:04d}.csv")
        (d / "quality.json").write_text(json.dumps(quality, sort_keys=True, indent=2) + "\n")
    log.info(f"wrote {len(starts)} virtual windows to {d}", extra={"phase": "generate"})


def cmd_evaluate(cfg, args):
    panel = _panel(cfg)
    cp = _find_checkpoint(cfg, args.checkpoint)
    plan = backtest_plan(cfg)
    report = bench.backtest(panel, plan, cp)
    if cp.phase == "done":
        report.quality = _quality(cp, panel, cfg["run"]["seed"])[0]
    report.validate()
    with locked(cfg["paths"]["report_dir"]) as d:
        (d / f"{args.name}.json").write_text(report.to_json())
        (d / f"{args.name}.csv").write_text(report.to_csv())
    agg = {f"{m}_mape_h{h}": report.aggregate(m, h) for m in report.models for h in plan.horizons}
    log.info(f"wrote {d / (args.name + '.json')}", extra={"phase": "evaluate", "losses": agg})


def _collect_reports(paths) -> dict[str, bench.MetricReport]:
    runs = {}
    for p in paths:
        data = json.loads(Path(p).read_text())
        if "runs" in data:
            runs.update({k: bench.MetricReport.from_dict(v) for k, v in data["runs"].items()})
        else:
            runs[Path(p).stem] = bench.MetricReport.from_dict(data)
    return runs


def summarize(runs: dict[str, bench.MetricReport]) -> dict:
    """Per-model, per-horizon means of the aggregate errors across runs."""
    mean: dict = {}
    for rep in runs.values():
        for model, block in rep.models.items():
            for h, e in block["aggregate"].items():
                slot = mean.setdefault(model, {}).setdefault(h, {"mae": [], "mape": []})
                for metric in ("mae", "mape"):
                    if e[metric] is not None:
                        slot[metric].append(e[metric])
    mean = {m: {h: {k: (float(np.mean(v)) if v else None) for k, v in e.items()} for h, e in hs.items()}
            for m, hs in mean.items()}
    return {"version": 1, "runs": {k: runs[k].to_dict() for k in sorted(runs)}, "mean": mean}


def cmd_report(cfg, args):
    d = Path(cfg["paths"]["report_dir"])
    paths = args.reports or sorted(p for p in d.glob("*.json") if p.name != f"{args.name}.json")
    if not paths:
        raise IncompatibleCheckpoint(f"no reports found in {d}: run evaluate first")
    summary = summarize(_collect_reports(paths))
    with locked(d):
        (d / f"{args.name}.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        rows = ["model,horizon,mae,mape"]
        for model in sorted(summary["mean"]):
            for h, e in sorted(summary["mean"][model].items(), key=lambda kv: int(kv[0])):
                rows.append(f"{model},{h},{e['mae']},{e['mape']}")
        (d / f"{args.name}.csv").write_text("\n".join(rows) + "\n")
    log.info(f"merged {len(summary['runs'])} reports into {d / (args.name + '.json')}",
             extra={"phase": "report"})


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "train": cmd_train,
            "generate": cmd_generate, "evaluate": cmd_evaluate, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("argv", message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="run.seed (beats STGAN_SEED and the file)")
    common.add_argument("--desk-scale", dest="desk_scale", action="store_true", default=None,
                        help="small predictor and GAN widths for CPU runs")
    common.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    common.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("--log-level", default="INFO")

    parser = _Parser(prog="stgforecast", description="Spatiotemporal GAN data augmentation for demand forecasting")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic panel CSV")
    sub.add_parser("pretrain", parents=[common], help="pretrain the predictor on real windows")
    p = sub.add_parser("train", parents=[common], help="pretrain (unless done) and run joint training")
    p.add_argument("--resume", help="continue from this checkpoint")
    for name in ("generate", "evaluate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="checkpoint file (default: newest in checkpoint_dir)")
    p = sub.choices["evaluate"]
    p.add_argument("--name", default="report", help="report file stem")
    p = sub.add_parser("report", parents=[common], help="merge MetricReport files into a summary")
    p.add_argument("reports", nargs="*", help="report JSON files (default: all in report_dir)")
    p.add_argument("--name", default="summary", help="summary file stem")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.log_level)
        cfg = resolve_config(args.config, args.overrides, seed=args.seed, desk_scale=args.desk_scale,
                             deterministic=args.deterministic)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 1
    except (ForecastError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
