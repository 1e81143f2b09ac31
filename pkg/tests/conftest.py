import numpy as np
import pytest

from prsa.glm import build_design
from prsa.simulate import Fig1Design, make_fig1_events


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def block_design():
    return build_design(make_fig1_events(Fig1Design()))


def mc_cov_se(samples):
    """Sample covariance of the rows of ``samples`` and its elementwise SE."""
    d = samples - samples.mean(axis=0)
    prod = d[:, :, None] * d[:, None, :]
    r = samples.shape[0]
    return prod.mean(axis=0) * r / (r - 1), prod.std(axis=0, ddof=1) / np.sqrt(r)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
