import sys
import warnings

import numpy as np
import pytest

from casdyf.tensor import default_dtype


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_small_inputs():
    # RMB warns when a test feeds maps smaller than its footprint
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="RMB on")
        yield


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
