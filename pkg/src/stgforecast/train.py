"""Predictor pretraining, joint GAN + predictor training, and checkpoints.

Checkpoint file layout (all integers little-endian)::

    8 bytes   magic b"STGANCKP"
    u32       format version
    u64       payload length L
    L bytes   payload
    u32       CRC-32 of the payload

    payload = u64 header length H | H bytes UTF-8 JSON header | array blob

The JSON header (sorted keys, compact separators) holds ``config``,
``regions``, ``meta`` and an ``arrays`` index of ``{name, dtype, shape,
offset, nbytes}`` entries pointing into the blob, which stores each array's
raw C-order bytes in name order. Writing the same record twice yields the
same bytes.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.func import functional_call

from .data import ScaleParams, TimeSeriesPanel, apply_scale, fit_scale, invert_scale, split_rows, window_arrays
from .errors import (
    CorruptCheckpoint,
    DivergenceDetected,
    IncompatibleCheckpoint,
    InvalidSpec,
    VersionMismatch,
)
from .predictor import Predictor, PredictorConfig, forecast_regions
from .spatial import batch_weights
from .stgan import GanConfig, GanState, d_loss, g_loss, init_gan, interpolates, penalty

log = logging.getLogger(__name__)

MAGIC = b"STGANCKP"
CHECKPOINT_VERSION = 1
STRATEGIES = ("joint", "augment")


@dataclass
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_t: float = 2e-4
    pretrain_lr: float = 2e-4
    batch_size: int = 64
    max_iters: int = 1000
    pretrain_epochs: int = 100
    warmup_iters: int = 0
    n_critic: int = 5
    lambda_gp: float = 10.0
    lambda_gan: float = 1.0
    lambda_pred: float = 1.0
    # real windows added to each predictor batch per virtual window
    mix_ratio: float = 1.0
    betas: tuple[float, float] = (0.5, 0.9)
    pretrain_betas: tuple[float, float] = (0.9, 0.999)
    # evaluations without validation improvement before stopping; None disables
    patience: int | None = 20
    eval_every: int = 10
    strategy: str = "joint"
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.pretrain_betas = tuple(self.pretrain_betas)
        for name in ("lr_g", "lr_d", "lr_t", "pretrain_lr"):
            if not getattr(self, name) > 0:
                raise InvalidSpec(f"{name} must be positive")
        if self.n_critic < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise InvalidSpec("n_critic, batch_size and eval_every must be >= 1")
        if min(self.max_iters, self.pretrain_epochs, self.warmup_iters) < 0:
            raise InvalidSpec("iteration and epoch counts must be nonnegative")
        if self.mix_ratio < 0:
            raise InvalidSpec("mix_ratio must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise InvalidSpec(f"strategy must be one of {STRATEGIES}")


@dataclass
class ExperimentConfig:
    """Everything needed to rebuild a training run; window sizes live here."""

    q: int = 90
    p: int = 1
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    deterministic: bool = True

    def __post_init__(self):
        self.split = tuple(self.split)
        if isinstance(self.predictor, dict):
            self.predictor = PredictorConfig(**self.predictor)
        if isinstance(self.gan, dict):
            self.gan = GanConfig(**self.gan)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.q < 2 or self.p < 1:
            raise InvalidSpec(f"need q >= 2 and p >= 1, got q={self.q}, p={self.p}")
        self.predictor.q, self.predictor.p = self.q, self.p

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**copy.deepcopy(d))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# --- data preparation -----------------------------------------------------

@dataclass
class Batch:
    """Real (B, q+p, N) windows, their (B, q, N) conditions and (B, N, N) weights."""

    real: torch.Tensor
    cond: torch.Tensor
    weights: torch.Tensor

    def __len__(self):
        return self.real.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.real[idx], self.cond[idx], self.weights[idx])


def segment_windows(scaled: np.ndarray, rows: slice, q: int, p: int,
                    normalization: str = "affine") -> Batch:
    """Windows fully inside ``rows``; the condition is the q rows before each
    window (zeros when the panel has no such history)."""
    start = rows.start
    seg = scaled[rows]
    hist, hor = window_arrays(seg, q, p)
    real = np.concatenate([hist, hor], axis=1)
    cond = np.zeros(hist.shape)
    for k in range(hist.shape[0]):
        s = start + k
        if s >= q:
            cond[k] = scaled[s - q:s]
    weights = batch_weights(hist, normalization)
    f32 = torch.get_default_dtype()
    return Batch(torch.as_tensor(real, dtype=f32), torch.as_tensor(cond, dtype=f32),
                 torch.as_tensor(weights, dtype=f32))


@dataclass
class PreparedData:
    scale: ScaleParams
    train: Batch
    val_history: np.ndarray | None   # scaled (B, q, N)
    val_actual: np.ndarray | None    # unscaled (B, p, N) horizons inside the validation rows


def prepare_data(panel: TimeSeriesPanel, config: ExperimentConfig) -> PreparedData:
    """Scale with training-row statistics and cut train/validation windows.

    Training windows lie inside the training rows. Validation windows have
    their horizon inside the validation rows and may draw history from the
    rows before. Nothing from the test rows is read.
    """
    tr, va, _ = split_rows(panel.T, config.split)
    scale = fit_scale(panel.values[tr])
    scaled = apply_scale(panel.values[:va.stop], scale)
    q, p = config.q, config.p
    if tr.stop - tr.start < q + p:
        raise InvalidSpec(f"training segment has {tr.stop - tr.start} rows; need q + p = {q + p}")
    train = segment_windows(scaled, tr, q, p, config.gan.normalization)
    val_hist = val_actual = None
    lo = max(0, va.start - q)
    if va.stop - va.start >= p and va.stop - lo >= q + p:
        val_hist = window_arrays(scaled[lo:va.stop], q, p)[0]
        val_actual = window_arrays(panel.values[lo:va.stop], q, p)[1].copy()
    return PreparedData(scale, train, val_hist, val_actual)


# --- forward helpers ------------------------------------------------------

@torch.no_grad()
def predict(predictor: Predictor, histories, chunk: int = 256) -> np.ndarray:
    """Deterministic (eval-mode) forecasts for (B, q, N) scaled histories -> (B, p, N)."""
    was_training = predictor.training
    predictor.eval()
    h = torch.as_tensor(np.array(histories), dtype=next(predictor.parameters()).dtype)
    out = [forecast_regions(h[i:i + chunk], predictor) for i in range(0, len(h), chunk)]
    predictor.train(was_training)
    if not out:
        return np.zeros((0, predictor.config.p, h.shape[-1]))
    return torch.cat(out).double().numpy()


def masked_mape(actual: np.ndarray, predicted: np.ndarray, eps: float = 1e-8) -> float:
    """MAPE over entries whose actual value is not ~0 (validation monitoring only)."""
    mask = np.abs(actual) >= eps
    if not mask.any():
        return float(np.mean(np.abs(actual - predicted)))
    return float(np.mean(np.abs((actual - predicted)[mask] / actual[mask])))


def _check_finite(losses: dict, phase: str):
    for name, value in losses.items():
        if not math.isfinite(value):
            raise DivergenceDetected(f"{phase}: {name} became {value}")


def _mse(pred, target):
    return torch.mean((pred - target) ** 2)


# --- the two training phases ----------------------------------------------

def pretrain_epoch(predictor: Predictor, opt: torch.optim.Optimizer, data: Batch, q: int,
                   batch_size: int, sampler: torch.Generator) -> float:
    """One shuffled pass of MSE training on real windows; returns the mean batch loss."""
    predictor.train()
    perm = torch.randperm(len(data), generator=sampler)
    total, count = 0.0, 0
    for i in range(0, len(perm), batch_size):
        b = data.take(perm[i:i + batch_size])
        loss = _mse(forecast_regions(b.real[:, :q], predictor), b.real[:, q:])
        _check_finite({"pretrain_loss": loss.item()}, "pretrain")
        opt.zero_grad()
        loss.backward()
        opt.step()
        total += loss.item() * len(b)
        count += len(b)
    return total / count


def _mixed_pred_loss(predictor, virtual_hist, batch: Batch, q: int, mix_ratio: float):
    """MSE of forecasts from virtual histories (real horizons) plus real windows at mix_ratio.

    Returns (loss, forecasts of the virtual histories).
    """
    target = batch.real[:, q:]
    B = len(batch)
    m = min(B, int(round(mix_ratio * B)))
    out = forecast_regions(torch.cat([virtual_hist, batch.real[:m, :q]]), predictor)
    loss_v = _mse(out[:B], target)
    if m == 0:
        return loss_v, out[:B]
    loss_r = _mse(out[B:], target[:m])
    return (loss_v * B + loss_r * m) / (B + m), out[:B]


def critic_step(gan: GanState, batch: Batch, fake: torch.Tensor, config: TrainConfig,
                sampler: torch.Generator) -> dict:
    """One critic update on real vs (detached) fake windows of equal length.

    Real and fake windows share one critic pass; the interpolates get their own
    so the double backward of the penalty only spans B samples.
    """
    D = gan.discriminator
    real = batch.real[:, :fake.shape[1]]
    fake = fake.detach()
    B = len(batch)
    x_hat = interpolates(real, fake, sampler)
    gp = penalty(D(x_hat, batch.weights), x_hat)
    real_scores, fake_scores = D(torch.cat([real, fake]), batch.weights.repeat(2, 1, 1)).split(B)
    loss = d_loss(real_scores, fake_scores, gp, config.lambda_gp)
    gan.opt_d.zero_grad()
    loss.backward()
    gan.opt_d.step()
    return {"d_loss": loss.item(), "gp": gp.item(),
            "w_gap": (real_scores.mean() - fake_scores.mean()).item()}


def _noise(batch: Batch, sampler):
    return torch.randn(batch.cond.shape, generator=sampler, dtype=batch.cond.dtype)


def _apply(params, grads, opt):
    for prm, g in zip(params, grads):
        prm.grad = g
    opt.step()
    opt.zero_grad(set_to_none=True)


def joint_step(gan: GanState, predictor: Predictor, pred_opt: torch.optim.Optimizer,
               batches: list[Batch], config: TrainConfig, q: int, sampler: torch.Generator,
               train_generator: bool = True) -> dict:
    """One iteration of joint training.

    ``batches`` holds n_critic critic batches followed by one generator batch.
    The critic compares real q+p windows with virtual histories extended by
    the predictor's (eval-mode) forecast. The generator then minimizes
    lambda_gan * L_G + lambda_pred * L_pred; the predictor receives only the
    lambda_pred * L_pred gradient, and the critic is not touched.
    """
    if len(batches) != config.n_critic + 1:
        raise ValueError(f"joint_step needs {config.n_critic + 1} batches, got {len(batches)}")
    G, D = gan.generator, gan.discriminator
    losses = {}
    critic = batches[:-1]
    # G and the predictor are fixed while the critic trains: draw all fakes in one
    # pass, with the predictor's deterministic (eval-mode) forecast as the tail
    predictor.eval()
    with torch.no_grad():
        hist = G(torch.cat([_noise(b, sampler) for b in critic]),
                 torch.cat([b.cond for b in critic]), torch.cat([b.weights for b in critic]))
        fakes = torch.cat([hist, forecast_regions(hist, predictor)], dim=1)
    predictor.train()
    for b, fake in zip(critic, fakes.split([len(b) for b in critic])):
        losses = critic_step(gan, b, fake, config, sampler)

    b = batches[-1]
    hist = G(_noise(b, sampler), b.cond, b.weights)
    lpred, _ = _mixed_pred_loss(predictor, hist, b, q, config.mix_ratio)
    # the critic's tail uses detached predictor weights: L_G reaches the generator
    # through the virtual history but never the predictor
    tail = _frozen_forecast(predictor, hist)
    lg = g_loss(D(torch.cat([hist, tail], dim=1), b.weights))
    total = config.lambda_gan * lg + config.lambda_pred * lpred
    losses.update(g_loss=lg.item(), pred_loss=lpred.item())
    _check_finite(losses, "joint")

    g_params = list(G.parameters()) if train_generator else []
    t_params = list(predictor.parameters()) if config.lambda_pred != 0 else []
    if g_params or t_params:
        grads = torch.autograd.grad(total, g_params + t_params, allow_unused=True)
        if g_params:
            _apply(g_params, grads[:len(g_params)], gan.opt_g)
        if t_params:
            _apply(t_params, grads[len(g_params):], pred_opt)
    D.zero_grad(set_to_none=True)
    gan.iter += 1
    return losses


def _frozen_forecast(predictor: Predictor, hist: torch.Tensor) -> torch.Tensor:
    """Eval-mode forecast that is differentiable in ``hist`` but constant in the weights."""
    frozen = {k: v.detach() for k, v in predictor.named_parameters()}
    was_training = predictor.training
    predictor.eval()
    try:
        out = functional_call(predictor, frozen, (hist.transpose(-1, -2),))
    finally:
        predictor.train(was_training)
    return out.transpose(-1, -2)


def warmup_step(gan: GanState, batches: list[Batch], config: TrainConfig,
                sampler: torch.Generator) -> dict:
    """Plain WGAN-GP iteration on q-length windows (no predictor involved)."""
    G, D = gan.generator, gan.discriminator
    losses = {}
    critic = batches[:-1]
    with torch.no_grad():
        fakes = G(torch.cat([_noise(b, sampler) for b in critic]),
                  torch.cat([b.cond for b in critic]), torch.cat([b.weights for b in critic]))
    for b, fake in zip(critic, fakes.split([len(b) for b in critic])):
        losses = critic_step(gan, b, fake, config, sampler)
    b = batches[-1]
    lg = g_loss(D(G(_noise(b, sampler), b.cond, b.weights), b.weights))
    losses["g_loss"] = lg.item()
    _check_finite(losses, "warmup")
    g_params = list(G.parameters())
    _apply(g_params, torch.autograd.grad(lg, g_params), gan.opt_g)
    D.zero_grad(set_to_none=True)
    gan.iter += 1
    return losses


def augment_step(gan: GanState, predictor: Predictor, pred_opt, batch: Batch, config: TrainConfig,
                 q: int, sampler: torch.Generator) -> dict:
    """Predictor fine-tuning on frozen-generator virtual histories plus real windows."""
    predictor.train()
    with torch.no_grad():
        hist = gan.generator(_noise(batch, sampler), batch.cond, batch.weights)
    loss, _ = _mixed_pred_loss(predictor, hist, batch, q, config.mix_ratio)
    pred_opt.zero_grad()
    loss.backward()
    pred_opt.step()
    losses = {"pred_loss": loss.item()}
    _check_finite(losses, "augment")
    return losses


# --- checkpoint record ----------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    regions: list[str]
    meta: dict
    arrays: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION

    @property
    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig.from_dict(self.config)

    @property
    def scale(self) -> ScaleParams:
        a = self.arrays
        return ScaleParams(a["scale/shift"], a["scale/scale"], a["scale/constant"])

    @property
    def phase(self) -> str:
        return self.meta["phase"]


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, arrays: dict):
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in arrays.items()
          if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


def _optim_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    arrays = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}/{idx}/{k}"] = (v.detach().cpu().numpy().copy()
                                             if torch.is_tensor(v) else np.asarray(v))
    return arrays, _plain(sd["param_groups"])


def _load_optim(prefix: str, opt: torch.optim.Optimizer, arrays: dict, groups: list):
    state: dict[int, dict] = {}
    for key, v in arrays.items():
        if key.startswith(prefix + "/"):
            idx, name = key[len(prefix) + 1:].split("/")
            state.setdefault(int(idx), {})[name] = torch.from_numpy(v.copy())
    groups = copy.deepcopy(groups)
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(cp: Checkpoint, path) -> None:
    names = sorted(cp.arrays)
    index, blobs, offset = [], [], 0
    for name in names:
        arr = np.asarray(cp.arrays[name])  # ascontiguousarray would turn 0-d into 1-d
        raw = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": cp.config, "regions": list(cp.regions), "meta": cp.meta,
                         "arrays": index}, sort_keys=True, separators=(",", ":")).encode()
    payload = struct.pack("<Q", len(header)) + header + b"".join(blobs)
    data = (MAGIC + struct.pack("<I", cp.version) + struct.pack("<Q", len(payload)) + payload
            + struct.pack("<I", zlib.crc32(payload)))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file (bad magic or too short)")
    version, = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    length, = struct.unpack_from("<Q", data, 12)
    end = 20 + length
    if len(data) != end + 4:
        raise CorruptCheckpoint(f"{path}: expected {end + 4} bytes, found {len(data)}")
    payload = data[20:end]
    crc, = struct.unpack_from("<I", data, end)
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpoint(f"{path}: checksum mismatch")
    try:
        hlen, = struct.unpack_from("<Q", payload, 0)
        header = json.loads(payload[8:8 + hlen])
        blob = payload[8 + hlen:]
        arrays = {}
        for e in header["arrays"]:
            raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
            arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return Checkpoint(header["config"], header["regions"], header["meta"], arrays, version)
    except (ValueError, KeyError, struct.error) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable payload ({exc})") from exc


def build_predictor(cp: Checkpoint) -> Predictor:
    cfg = cp.experiment
    pred = Predictor(cfg.predictor)
    _load_module("predictor", pred, cp.arrays)
    pred.eval()
    return pred


def build_gan(cp: Checkpoint) -> GanState:
    cfg = cp.experiment
    gan = init_gan(len(cp.regions), cfg.q, cfg.gan, lr_g=cfg.train.lr_g, lr_d=cfg.train.lr_d,
                   betas=cfg.train.betas)
    _load_module("generator", gan.generator, cp.arrays)
    _load_module("discriminator", gan.discriminator, cp.arrays)
    gan.iter = cp.meta["iter"]
    return gan


# --- orchestration --------------------------------------------------------

class Trainer:
    """Owns all mutable training state for one run (single-threaded)."""

    def __init__(self, panel: TimeSeriesPanel, config: ExperimentConfig):
        self.panel = panel
        self.config = config
        tc = config.train
        if config.deterministic:
            torch.set_num_threads(1)
        self.data = prepare_data(panel, config)
        torch.manual_seed(tc.seed)
        self.sampler = torch.Generator().manual_seed(tc.seed + 1)
        self.predictor = Predictor(config.predictor)
        self.gan = init_gan(panel.N, config.q, config.gan, lr_g=tc.lr_g, lr_d=tc.lr_d, betas=tc.betas)
        self.pretrain_opt = torch.optim.Adam(self.predictor.parameters(), lr=tc.pretrain_lr,
                                             betas=tc.pretrain_betas)
        self.joint_opt = torch.optim.Adam(self.predictor.parameters(), lr=tc.lr_t, betas=tc.betas)
        self.phase = "init"
        self.epoch = 0
        self.history: dict[str, list] = {"pretrain_loss": [], "val_mape": [], "d_loss": [],
                                         "g_loss": [], "pred_loss": [], "gp": []}
        self.best_val = math.inf
        self.best_state: dict | None = None
        self.bad_evals = 0
        self.stopped = False
        self.on_checkpoint: Callable[[Checkpoint], None] | None = None

    # validation / early stopping
    def validate(self) -> float | None:
        d = self.data
        if d.val_history is None:
            return None
        pred = predict(self.predictor, d.val_history)
        return masked_mape(d.val_actual, invert_scale(pred, d.scale))

    def _track(self) -> None:
        val = self.validate()
        if val is None:
            return
        self.history["val_mape"].append(val)
        if val < self.best_val:
            self.best_val = val
            self.best_state = copy.deepcopy(self.predictor.state_dict())
            self.bad_evals = 0
        else:
            self.bad_evals += 1
            patience = self.config.train.patience
            if patience is not None and self.bad_evals >= patience:
                self.stopped = True

    def _restore_best(self) -> None:
        if self.best_state is not None:
            self.predictor.load_state_dict(self.best_state)

    def _reset_tracking(self) -> None:
        self.best_val, self.bad_evals, self.stopped = math.inf, 0, False
        self.best_state = None
        self._track()
        self.bad_evals = 0

    def _batches(self, k: int) -> list[Batch]:
        d = self.data.train
        bs = min(self.config.train.batch_size, len(d))
        return [d.take(torch.randint(len(d), (bs,), generator=self.sampler)) for _ in range(k)]

    def _record(self, losses: dict) -> None:
        for k in ("d_loss", "g_loss", "pred_loss", "gp"):
            if k in losses:
                self.history[k].append(losses[k])

    # phases
    def pretrain(self) -> None:
        tc = self.config.train
        while self.epoch < tc.pretrain_epochs and not self.stopped:
            loss = pretrain_epoch(self.predictor, self.pretrain_opt, self.data.train, self.config.q,
                                  tc.batch_size, self.sampler)
            self.epoch += 1
            self.history["pretrain_loss"].append(loss)
            self._track()
            log.info("pretrain", extra={"phase": "pretrain", "iter": self.epoch,
                                        "losses": {"mse": loss, "val_mape": self.best_val}})
        self._restore_best()
        self.phase = "pretrained"

    def step(self) -> dict:
        tc = self.config.train
        it = self.gan.iter
        if tc.strategy == "augment" or it < tc.warmup_iters:
            if tc.strategy == "augment" and it >= tc.max_iters:
                losses = augment_step(self.gan, self.predictor, self.joint_opt, self._batches(1)[0],
                                      tc, self.config.q, self.sampler)
                self.gan.iter += 1
            else:
                losses = warmup_step(self.gan, self._batches(tc.n_critic + 1), tc, self.sampler)
        else:
            losses = joint_step(self.gan, self.predictor, self.joint_opt,
                                self._batches(tc.n_critic + 1), tc, self.config.q, self.sampler)
        self._record(losses)
        return losses

    def total_iters(self) -> int:
        tc = self.config.train
        if tc.strategy == "augment":
            # GAN-only training, then the same number of predictor fine-tuning steps
            return 2 * tc.max_iters
        return tc.warmup_iters + tc.max_iters

    def run(self, checkpoint_dir=None, checkpoint_every: int = 0) -> Checkpoint:
        tc = self.config.train
        ckdir = Path(checkpoint_dir) if checkpoint_dir else None
        if self.phase == "init":
            self.pretrain()
            if ckdir:
                save_checkpoint(self.checkpoint(), ckdir / "pretrained.ckpt")
        if self.phase == "pretrained":
            self.phase = "joint"
            self._reset_tracking()
        total = self.total_iters()
        while self.phase == "joint" and self.gan.iter < total and not self.stopped:
            losses = self.step()
            it = self.gan.iter
            tuning = tc.strategy == "joint" and it > tc.warmup_iters or \
                tc.strategy == "augment" and it > tc.max_iters
            if tuning and it % tc.eval_every == 0:
                self._track()
            if it % max(1, tc.eval_every) == 0:
                log.info("joint", extra={"phase": "joint", "iter": it, "losses": losses})
            if ckdir and checkpoint_every and it % checkpoint_every == 0:
                save_checkpoint(self.checkpoint(), ckdir / f"iter_{it:06d}.ckpt")
        if self.phase == "joint":
            self._track()
            self._restore_best()
            self.phase = "done"
        cp = self.checkpoint()
        if ckdir:
            save_checkpoint(cp, ckdir / "final.ckpt")
        return cp

    # persistence
    def checkpoint(self) -> Checkpoint:
        s = self.data.scale
        arrays = {"scale/shift": s.shift.copy(), "scale/scale": s.scale.copy(),
                  "scale/constant": s.constant.copy(),
                  "rng/torch": torch.get_rng_state().numpy().copy(),
                  "rng/sampler": self.sampler.get_state().numpy().copy()}
        arrays.update(_module_arrays("predictor", self.predictor))
        arrays.update(_module_arrays("generator", self.gan.generator))
        arrays.update(_module_arrays("discriminator", self.gan.discriminator))
        if self.best_state is not None:
            arrays.update({f"best/{k}": v.detach().numpy().copy() for k, v in self.best_state.items()})
        groups = {}
        for name, opt in (("pretrain", self.pretrain_opt), ("joint", self.joint_opt),
                          ("g", self.gan.opt_g), ("d", self.gan.opt_d)):
            arr, groups[name] = _optim_arrays(f"opt/{name}", opt)
            arrays.update(arr)
        meta = {"phase": self.phase, "iter": self.gan.iter, "epoch": self.epoch,
                "history": _plain(self.history), "best_val": self.best_val,
                "bad_evals": self.bad_evals, "stopped": self.stopped, "optim": groups,
                "frequency": self.panel.frequency, "n_rows": self.panel.T}
        return Checkpoint(self.config.to_dict(), list(self.panel.regions), meta, arrays)

    @classmethod
    def from_checkpoint(cls, panel: TimeSeriesPanel, cp: Checkpoint,
                        config: ExperimentConfig | None = None) -> "Trainer":
        """Rebuild the exact state saved in ``cp``.

        ``config`` may replace the saved training settings (iteration budget,
        learning rates, ...) but must agree on windows, split and model shapes.
        """
        if list(panel.regions) != list(cp.regions):
            raise IncompatibleCheckpoint("panel regions differ from the checkpoint's")
        saved = cp.experiment
        if config is not None:
            for key in ("q", "p", "split", "predictor", "gan"):
                if getattr(config, key) != getattr(saved, key):
                    raise IncompatibleCheckpoint(f"config {key} differs from the checkpoint's")
        t = cls(panel, config or saved)
        a, m = cp.arrays, cp.meta
        if t.data.scale != cp.scale:
            raise IncompatibleCheckpoint("training rows differ from the checkpointed run")
        _load_module("predictor", t.predictor, a)
        _load_module("generator", t.gan.generator, a)
        _load_module("discriminator", t.gan.discriminator, a)
        for name, opt in (("pretrain", t.pretrain_opt), ("joint", t.joint_opt),
                          ("g", t.gan.opt_g), ("d", t.gan.opt_d)):
            _load_optim(f"opt/{name}", opt, a, m["optim"][name])
        if config is not None:
            tc = config.train
            for opt, lr, betas in ((t.pretrain_opt, tc.pretrain_lr, tc.pretrain_betas),
                                   (t.joint_opt, tc.lr_t, tc.betas), (t.gan.opt_g, tc.lr_g, tc.betas),
                                   (t.gan.opt_d, tc.lr_d, tc.betas)):
                for g in opt.param_groups:
                    g["lr"], g["betas"] = lr, tuple(betas)
        best = {k[5:]: torch.from_numpy(v.copy()) for k, v in a.items() if k.startswith("best/")}
        t.best_state = best or None
        t.phase, t.gan.iter, t.epoch = m["phase"], m["iter"], m["epoch"]
        t.history = copy.deepcopy(m["history"])
        t.best_val, t.bad_evals, t.stopped = m["best_val"], m["bad_evals"], m["stopped"]
        torch.set_rng_state(torch.from_numpy(a["rng/torch"].copy()))
        t.sampler.set_state(torch.from_numpy(a["rng/sampler"].copy()))
        return t


def pretrain_predictor(panel: TimeSeriesPanel, config: ExperimentConfig) -> Checkpoint:
    """Run only the real-window pretraining phase."""
    t = Trainer(panel, config)
    t.pretrain()
    return t.checkpoint()


def train(panel: TimeSeriesPanel, config: ExperimentConfig | None = None, *, resume: Checkpoint | None = None,
          checkpoint_dir=None, checkpoint_every: int = 0) -> Checkpoint:
    """Pretrain (unless resuming past it), then run the joint phase to completion."""
    if resume is not None:
        trainer = Trainer.from_checkpoint(panel, resume, config)
    else:
        trainer = Trainer(panel, config or ExperimentConfig())
    return trainer.run(checkpoint_dir, checkpoint_every)
