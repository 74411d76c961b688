"""
conftest.py
-----------
Shared fixtures and the --runslow switch for long Monte Carlo runs.

Usage:
    pytest tests/ -v
    pytest tests/ -v --runslow
"""

import os
import sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest

from core.channel_sim import make_constellation
from core.config import ExperimentConfig
from core.math_core import GaussianPosterior, make_rng


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long Monte Carlo reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long Monte Carlo run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# ── Shared fixtures ──────────────────────────

@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def qpsk():
    return make_constellation("qpsk")


@pytest.fixture
def qam16():
    return make_constellation("qam16")


@pytest.fixture
def tiny_config():
    """A sweep small enough to run in a couple of seconds."""
    return ExperimentConfig(
        n_antennas=2,
        n_users=2,
        snr_grid_db=[10.0, 20.0],
        blocks_per_point=2,
        est_repetitions=2,
        t_det=8,
        max_iters=40,
        report_samples=10,
        seed=5,
    )


def random_posterior(rng, dim, batch=(), scale=1.0):
    """Posterior with N(0, scale) means and variances in [0.05, 2]."""
    shape = tuple(batch) + (dim,)
    return GaussianPosterior(scale * rng.standard_normal(shape), rng.uniform(0.05, 2.0, shape))


@pytest.fixture
def make_posterior():
    return random_posterior


@pytest.fixture
def complex_vector():
    def _draw(rng, *shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return _draw

