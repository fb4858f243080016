import sys

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from talnet.synth import SynthConfig, generate


@pytest.fixture(autouse=True, scope="session")
def single_thread_blas():
    # bit-exact determinism needs a fixed reduction order
    with threadpool_limits(1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return SynthConfig(
        num_train=5, num_test=3, T=64, D=4, num_classes=2, mean_instances=2.0,
        max_instances=3, min_len=1, max_len=8, noise=0.2, seed=11,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config):
    return generate(tiny_config)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
