import numpy as np
import pytest

from vlpt import tensor as T
from vlpt.rng import RngState


@pytest.fixture(autouse=True)
def double_precision():
    """Property tests run in double precision; individual tests may switch."""
    T.set_default_dtype("double")
    yield
    T.set_default_dtype("double")


@pytest.fixture
def rng():
    return RngState(1234)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-10)
    return float(np.max(np.abs(a - b) / denom))


def finite_difference_grad(f, x, step=1e-6):
    """Central finite differences of scalar f at numpy array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g
