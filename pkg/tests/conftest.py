import sys

import numpy as np
import pytest

from otfs_jspl.otfs import OtfsConfig


@pytest.fixture
def small_cfg():
    return OtfsConfig(n_delay=8, n_doppler=8, n_cp=2, n_tx=4)


@pytest.fixture
def desk_cfg():
    return OtfsConfig(n_delay=32, n_doppler=16, n_cp=8, n_tx=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(results):
        checks = results[criterion]
        ok = all(passed for passed, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
