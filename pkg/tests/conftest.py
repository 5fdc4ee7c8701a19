import numpy as np
import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: slow end-to-end acceptance criteria")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_counts(rng):
    """Two obvious groups of cells, a few genes, some zeros."""
    n, g = 40, 6
    lab = np.repeat([0, 1], n // 2)
    lam = np.where(lab[:, None] == 0, 2.0, 9.0) * np.ones((1, g))
    y = rng.poisson(lam)
    y[rng.random((n, g)) < 0.2] = 0
    return y, lab


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
