import numpy as np
import pytest

from vrvc import config


@pytest.fixture(autouse=True)
def f64_mode():
    """Tests run at f64 unless they opt into another mode themselves."""
    config.set_float_mode("f64")
    yield
    config.set_float_mode("f64")


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
