import numpy as np
import pytest

from mmdit_edit.model import ModelConfig, ToyMMDiT


@pytest.fixture(scope="session")
def model():
    return ToyMMDiT(ModelConfig())


@pytest.fixture(scope="session")
def small_model():
    # shallow variant for the slower multi-run tests
    return ToyMMDiT(ModelConfig(depth=3, image_grid=(4, 4), text_len=8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
