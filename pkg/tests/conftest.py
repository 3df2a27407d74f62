import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: end-to-end criteria gates (minutes to hours); "
        "deselect with -m 'not acceptance' for a fast pass")
