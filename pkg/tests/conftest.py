"""Shared fixtures and the ``--runslow`` switch."""

import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow reproductions"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def central_difference(func, x, step=1e-6):
    """Gradient of scalar ``func`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        shift = np.zeros_like(x)
        shift[idx] = step
        grad[idx] = (func(x + shift) - func(x - shift)) / (2.0 * step)
    return grad


@pytest.fixture
def fd_gradient():
    return central_difference


def relative_error(actual, expected):
    actual, expected = np.asarray(actual), np.asarray(expected)
    return np.linalg.norm(actual - expected) / max(np.linalg.norm(expected), 1e-12)


@pytest.fixture
def rel_error():
    return relative_error
