import numpy as np
import pytest
import torch

import protocols

torch.set_num_threads(1)

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def models(request):
    directory = request.config.cache.mkdir("feasible_brnn_models")
    return protocols.ModelStore(directory)


@pytest.fixture
def verdict():
    """Record an acceptance outcome; it is echoed in the terminal summary."""

    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
