import numpy as np
import pytest

from gridloop import tensor as tl


@pytest.fixture(autouse=True)
def clean_tape():
    tl.tape().clear()
    yield
    tl.tape().clear()


@pytest.fixture
def f64():
    """Run the test in float64 (verification precision)."""
    with tl.using_dtype("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
