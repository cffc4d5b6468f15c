"""Shared fixtures.  ``desk_run`` is the desk-scale end-to-end experiment.

Setup: 200 synthetic frames (3x32x32) at 10 fps; the first 150 train the
autoencoder and the last 50 are held out.  The baseline-alone
configuration is the toy codec at quality 50 on the held-out frames.  The
pipeline gets the same total budget: the base codec is rate-controlled to
the part of the budget the residual side-channel does not need, the
autoencoder is trained on residuals at that base rate, and the held-out
frames go through server_encode / client_decode.
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from binres import pipeline
from binres.autoencoder import AutoencoderConfig, ResidualAutoencoder, TrainConfig, TrainHistory, train
from binres.codec import ToyDCTCodec
from binres.data import synthetic_corpus
from binres.metrics import psnr

FPS = 10.0
N_TRAIN, N_HELD_OUT = 150, 50
MID_QUALITY = 50.0
EPOCHS = 15


@dataclass
class DeskRun:
    x_train: np.ndarray
    x_test: np.ndarray
    y_train: np.ndarray
    model: ResidualAutoencoder
    history: TrainHistory
    baseline: pipeline.EncodeResult
    result: pipeline.EncodeResult
    decoded: np.ndarray
    budget_bps: float
    split: float
    train_quality: float
    seconds: float

    @property
    def y_test(self) -> np.ndarray:
        return self.result.base.decoded

    def mean_psnr(self, a, b) -> float:
        return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


def run_desk_experiment(epochs: int = EPOCHS, seed: int = 0) -> DeskRun:
    t0 = time.perf_counter()
    x = synthetic_corpus(N_TRAIN + N_HELD_OUT, size=32, seed=0)
    x_train, x_test = x[:N_TRAIN], x[N_TRAIN:]
    # a fixed-quality run ignores the budget, so any positive value will do
    baseline = pipeline.server_encode(x_test, float("inf"), 1.0, ToyDCTCodec(quality=MID_QUALITY), None, FPS)
    budget = baseline.report.total_bits / baseline.report.duration_seconds
    acfg = AutoencoderConfig(L=2, C=8, binarizer="hardtanh")
    split = pipeline.auto_split(budget, FPS, acfg, x.shape[1:])
    rate = ToyDCTCodec(quality=None, fps=FPS)
    q_train = rate.quality_for_bits(x_train, split * budget * N_TRAIN / FPS)
    y_train = ToyDCTCodec(quality=q_train).encode(x_train).decoded
    model, history = train(pipeline.compute_residual(x_train, y_train),
                           TrainConfig(epochs=epochs, seed=seed), acfg)
    result = pipeline.server_encode(x_test, budget, split, rate, model, FPS)
    decoded = pipeline.client_decode(result.container, model)
    return DeskRun(x_train, x_test, y_train, model, history, baseline, result, decoded, budget, split,
                   q_train, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def desk_run() -> DeskRun:
    return run_desk_experiment()


@pytest.fixture(scope="session")
def corpus() -> np.ndarray:
    return synthetic_corpus(200, size=32, seed=0)


_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record and echo one PASS/FAIL line per acceptance criterion."""

    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
