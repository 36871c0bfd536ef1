import numpy as np
import pytest

from triseg.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def f64_default():
    """Verification runs in f64; individual tests opt into f32 explicitly."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
