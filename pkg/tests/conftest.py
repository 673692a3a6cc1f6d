"""Shared fixtures and the ``--runslow`` switch."""
from __future__ import annotations

import numpy as np
import pytest

from config import ChainConfig, get_model_config
from model_core import CurrentStatusDataset
from simgen import SimConfig, generate_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow statistical tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(autouse=True)
def _thread_cap(monkeypatch):
    monkeypatch.setenv("MSMA_THREADS", "2")


@pytest.fixture
def small_dataset() -> CurrentStatusDataset:
    """Twelve subjects with four teeth each from the synthetic generator."""
    data, _ = generate_dataset(SimConfig(n=12, m=4), np.random.default_rng(7))
    return data


@pytest.fixture
def short_chain() -> ChainConfig:
    return ChainConfig(iterations=30, burn_in=20, thin=2, seed=3, b_lik=20)


@pytest.fixture
def small_model():
    return get_model_config("s-gp-dp", {"L": 6, "H": 4})
