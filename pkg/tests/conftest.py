import numpy as np
import pytest

from eatnet import tensor as T


@pytest.fixture(autouse=True)
def verification_precision():
    """All tests run in 64-bit verification precision unless they opt out."""
    T.set_precision(64)
    yield
    T.set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
