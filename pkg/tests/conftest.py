"""
Pytest configuration and fixtures for the probabilistic integrator tests
"""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from core.linmultistep import Trajectory  # noqa: E402
from core.problems import Ivp, fitzhugh_nagumo, linear_test_system, logistic_growth  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def linear_system():
    """Scalar decay z' = -z"""
    return linear_test_system(-1.0)


@pytest.fixture
def linear_ivp(linear_system):
    return Ivp(linear_system, [1.0], 1.0, 0.1)


@pytest.fixture
def matrix_system():
    return linear_test_system([[-1.0, 0.5], [0.0, -2.0]])


@pytest.fixture
def fhn_system():
    return fitzhugh_nagumo((0.2, 0.2, 3.0))


@pytest.fixture
def fhn_ivp(fhn_system):
    return Ivp(fhn_system, [-1.0, 1.0], 20.0, 0.1)


@pytest.fixture
def logistic_system():
    return logistic_growth(1.0)


def linear_ivp_factory(lam=-1.0, x0=1.0, t_end=1.0):
    system = linear_test_system(lam)
    return lambda h: Ivp(system, [x0], t_end, h)


def central_difference_jacobian(system, z, eps=1e-6):
    d = system.dimension
    jac = np.empty((d, d))
    for k in range(d):
        step = np.zeros(d)
        step[k] = eps
        jac[:, k] = (system.f(z + step) - system.f(z - step)) / (2 * eps)
    return jac


# Test data constants
THETA_TRUE = (0.2, 0.2, 3.0)
FHN_X0 = (-1.0, 1.0)
CONVERGENCE_STEPS = (0.1, 0.05, 0.025, 0.0125)


def pytest_configure(config):
    """Configure pytest with custom markers"""
    config.addinivalue_line(
        "markers", "slow: full-length reproduction runs (set RUN_SLOW=1)"
    )
    config.addinivalue_line(
        "markers", "integration: mark test as integration test"
    )


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers automatically"""
    for item in items:
        if "slow" in item.name.lower():
            item.add_marker(pytest.mark.slow)
        if "integration" in item.name.lower() or "test_cli" in item.nodeid:
            item.add_marker(pytest.mark.integration)


def pytest_runtest_setup(item):
    """Skip the long paper reproductions unless asked for"""
    if "slow" in [mark.name for mark in item.iter_markers()]:
        if os.environ.get('RUN_SLOW') != '1':
            pytest.skip("slow reproduction run; set RUN_SLOW=1")


class IntegratorAssertions:
    """Custom assertions for trajectories and convergence fits"""

    @staticmethod
    def assert_valid_trajectory(trajectory, ivp):
        assert isinstance(trajectory, Trajectory)
        assert trajectory.states.shape == (ivp.n_steps + 1, ivp.system.dimension)
        np.testing.assert_array_equal(trajectory.states[0], ivp.x0)
        assert np.all(np.isfinite(trajectory.states))
        assert np.all(np.diff(trajectory.times) > 0)

    @staticmethod
    def assert_order(result, expected, tol):
        assert abs(result.slope - expected) <= tol, (
            f"{result.method}: slope {result.slope:.3f}, expected {expected} +/- {tol}"
        )


@pytest.fixture
def pam_assertions():
    """Provide custom integrator assertions"""
    return IntegratorAssertions()
