from __future__ import annotations

import time

import numpy as np
import pytest

from varikit import pipeline
from varikit.backbone import BackboneConfig, init_weights


def numeric_grad(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f(arr)`` w.r.t. every entry of ``arr``."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(arr)
        flat[i] = orig - step
        down = f(arr)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, floor: float = 1e-9):
    err = np.abs(analytic - numeric)
    bound = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
    worst = float((err - bound).max())
    assert worst <= 0, f"gradient mismatch: max excess {worst:.3e}"


@pytest.fixture
def tiny_config():
    return BackboneConfig(vocab_size=16, d=8, n_layers=2, n_heads=2, max_seq_len=16)


@pytest.fixture
def tiny_weights(tiny_config):
    return init_weights(tiny_config, np.random.default_rng(0), dtype=np.float64).freeze()


@pytest.fixture
def small_weights():
    cfg = BackboneConfig(vocab_size=32, d=16, n_layers=2, n_heads=4, max_seq_len=32)
    return init_weights(cfg, np.random.default_rng(1)).freeze()


class TrainedPipeline:
    """Desk-scale models shared by the slow tests (built once per session)."""

    def __init__(self):
        start = time.perf_counter()
        self.cfg = pipeline.PipelineConfig(seed=0)
        self.data = pipeline.make_data(self.cfg)
        self.pretrained = pipeline.build_pretrained(self.cfg, self.data)
        self.task_model = pipeline.build_task_model(self.cfg, self.data, self.pretrained)
        self.baseline = pipeline.evaluate_accuracy(self.data.eval, self.task_model)
        self._bundles = {}
        self.logs = {}
        self.seconds = time.perf_counter() - start

    def bundle(self, k: int, pretrain: bool = True, compress_mode: str = "learned",
               decompress_mode: str = "learned"):
        key = (k, pretrain, compress_mode, decompress_mode)
        if key not in self._bundles:
            start = time.perf_counter()
            log = self.logs[key] = []
            self._bundles[key] = pipeline.train_bundle(
                self.cfg, self.data, self.pretrained, self.task_model, k, pretrain=pretrain,
                compress_mode=compress_mode, decompress_mode=decompress_mode, log=log.append,
            )
            self.seconds += time.perf_counter() - start
        return self._bundles[key]

    def result(self, k: int, **kw):
        modes = {m: kw[m] for m in ("compress_mode", "decompress_mode") if m in kw}
        return pipeline.evaluate_bundle(self.cfg, self.data, self.task_model, self.bundle(k, **kw),
                                        self.baseline, **modes)


@pytest.fixture(scope="session")
def trained():
    return TrainedPipeline()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; the lines are echoed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
