from dataclasses import replace

import numpy as np
import pytest

from pintopt.model_problem import ModelConfig, VanDerPolAdvection


def small_config(N=64, dt=5e-4, L=20, **kw) -> ModelConfig:
    """Short horizon, coarse space grid; keeps dense oracles and loops cheap."""
    return ModelConfig(N=N, dt=dt, T=N * dt, L=L, dx=1.0 / L, **kw)


def small_model(N=64, dt=5e-4, L=20, **kw) -> VanDerPolAdvection:
    return VanDerPolAdvection(small_config(N, dt, L, **kw))


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def linear_model():
    return small_model(N=8, L=10, linear=True, a_target=1.0)


def oscillating_state(model, rng, n=None):
    """A plausible, non-trivial space-time state: serial trajectory plus noise."""
    u = model.serial_sweep(2.0, n)
    return u + 0.05 * rng.standard_normal(u.shape)


__all__ = ["small_config", "small_model", "rel_err", "oscillating_state", "replace", "record_verdict"]


# -- acceptance verdicts -------------------------------------------------------------

VERDICTS: dict = {}


def record_verdict(number: int, ok: bool, text: str) -> bool:
    """Remember one PASS/FAIL line per acceptance criterion and echo it."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {text}"
    VERDICTS[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
