import sys

import numpy as np
import pytest

from cascadetrack import kernels


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run a test once per kernel backend by swapping the active implementation."""
    impl = kernels.get_backend(request.param)
    monkeypatch.setattr(kernels, "_impl", impl)
    return request.param


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.LINES:
        terminalreporter.write_line(line)
