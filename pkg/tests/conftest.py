import numpy as np
import pytest

from sthl import _kernels
from sthl.dataset import SamplePair
from sthl.model import ModelConfig, init_model


@pytest.fixture(params=_kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    previous = _kernels.BACKEND
    _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def tiny_config():
    return ModelConfig(N=3, d=4, C=2, K=2, rng_seed=11)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config)


@pytest.fixture
def tiny_pair(rng):
    return SamplePair(rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), 1)


def random_pair(rng, N, d, label=0):
    return SamplePair(rng.standard_normal((N, d)), rng.standard_normal((N, d)), label)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
