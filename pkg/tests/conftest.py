"""Shared pytest configuration and fixtures."""

import numpy as np
import pytest

from services.encoding_service import AttributeSchema


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale slow checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def schema():
    return AttributeSchema()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
