import numpy as np
import pytest

from thnse.stepper import build_forms


@pytest.fixture(scope="session")
def forms2():
    """d=2, n=4 forms shared across cheap tests."""
    return build_forms(2, 4)


@pytest.fixture(scope="session")
def forms8():
    return build_forms(2, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
