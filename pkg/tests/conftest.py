import copy
import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from stgforecast.data import synth_panel
from stgforecast.predictor import PredictorConfig
from stgforecast.stgan import GanConfig
from stgforecast.train import ExperimentConfig, TrainConfig, Trainer

settings.register_profile("default", deadline=None, max_examples=60, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)

_ACCEPTANCE: list[str] = []

# criterion 8 / 9 setup: N=4, T=400, q=30, p=3, desk widths, 200 epochs + 300 iterations
DESK_SEEDS = (0, 1, 2)
DESK_N, DESK_T, DESK_Q, DESK_P = 4, 400, 30, 3


def desk_config(seed: int, strategy: str = "joint") -> ExperimentConfig:
    return ExperimentConfig(
        q=DESK_Q, p=DESK_P,
        predictor=PredictorConfig().desk_scale(), gan=GanConfig().desk_scale(),
        train=TrainConfig(pretrain_epochs=200, max_iters=300, batch_size=32, seed=seed,
                          strategy=strategy))


def small_config(seed: int = 0, **train) -> ExperimentConfig:
    """Tiny shapes for unit-level training tests."""
    tc = dict(batch_size=16, pretrain_epochs=3, max_iters=10, patience=None, eval_every=5, seed=seed)
    tc.update(train)
    return ExperimentConfig(q=12, p=2,
                            predictor=PredictorConfig(d_model=16, n_heads=2, n_layers=1, d_ffn=32),
                            gan=GanConfig(f1=4, f2=8, hidden=8), train=TrainConfig(**tc))


@pytest.fixture
def acceptance(request):
    """record(criterion, ok, detail) prints a PASS/FAIL line and keeps it for the summary."""

    def record(criterion: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


class DeskRuns:
    """Lazily trains and caches desk-scale runs shared by several acceptance tests."""

    def __init__(self):
        self.panels = {s: synth_panel(DESK_N, DESK_T, seed=s) for s in DESK_SEEDS}
        self._joint = {}
        self._augment = {}

    def joint(self, seed):
        """(pretrained trainer checkpoint, final checkpoint, seconds for pretrain + joint)."""
        if seed not in self._joint:
            t0 = time.perf_counter()
            tr = Trainer(self.panels[seed], desk_config(seed))
            tr.pretrain()
            pre = tr.checkpoint()
            final = tr.run()
            self._joint[seed] = (pre, final, time.perf_counter() - t0)
        return self._joint[seed]

    def augment(self, seed):
        """No-joint variant started from the same pretrained predictor."""
        if seed not in self._augment:
            pre, _, _ = self.joint(seed)
            tr = Trainer.from_checkpoint(self.panels[seed], pre, desk_config(seed, "augment"))
            self._augment[seed] = tr.run()
        return self._augment[seed]


@pytest.fixture(scope="session")
def desk_runs():
    return DeskRuns()


class SmallRuns:
    """500 joint iterations at tiny shapes, three seeds; generator snapshots before and after."""

    seeds = (0, 1, 2)

    def __init__(self):
        self._runs = {}

    def get(self, seed):
        if seed not in self._runs:
            panel = synth_panel(3, 240, seed=seed)
            tr = Trainer(panel, small_config(seed, pretrain_epochs=5, max_iters=500))
            tr.pretrain()
            before = copy.deepcopy(tr.gan.generator)
            tr.run()
            self._runs[seed] = (panel, tr, before)
        return self._runs[seed]


@pytest.fixture(scope="session")
def small_runs():
    return SmallRuns()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
