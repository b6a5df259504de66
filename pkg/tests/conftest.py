import numpy as np
import pytest

from pdprune import toy
from pdprune.analysis import partition, redundancy_profile
from pdprune.model import ModelConfig, build_model, collect_trace

SMALL = ModelConfig(n_blocks=4, d_model=16, n_heads=2, vocab=16, max_seq=32)


@pytest.fixture
def small_model():
    return build_model(SMALL, seed=3)


@pytest.fixture(scope="session")
def toy_instance():
    """Shipped toy model, merged blocks, calibration set, profile and partition."""
    model, merged = toy.load_toy()
    cal = toy.calibration()
    profile = redundancy_profile(collect_trace(model, cal))
    part = partition(profile, toy.K, toy.D_T)
    return {"model": model, "merged": merged, "calibration": cal, "profile": profile, "partition": part}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line per acceptance criterion; returns the verdict."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
