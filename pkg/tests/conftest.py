import numpy as np
import pytest

from collapsar.kernels import CosineSum, factorize
from collapsar.markov import CollapseSystem
from collapsar.qcore import SIGMA_X, SIGMA_Z

SZ = np.diag([1.0, -1.0]).astype(complex)
SX = np.array([[0, 1], [1, 0]], dtype=complex)
PSI0 = np.array([0.6, 0.8], dtype=complex)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo checks")


@pytest.fixture
def dephasing():
    """Qubit with H = 0, A = sigma_z, gamma = 1."""
    return CollapseSystem(np.zeros((2, 2)), [SIGMA_Z], 1.0)


@pytest.fixture
def driven():
    """Qubit with H = sigma_x, A = sigma_z (non-commuting)."""
    return CollapseSystem(SIGMA_X, [SIGMA_Z], 1.0)


@pytest.fixture
def single_mode():
    """Single cosine line: D(tau) = cos(2 tau), i.e. kappa = 1, omega = 2."""
    return factorize(CosineSum([np.eye(1)], [2.0]))
