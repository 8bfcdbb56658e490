import numpy as np
import pytest

from neuroadapt.rng import Rng


def numerical_gradient(f, x, h=1e-5):
    """Central-difference gradient of a scalar function, 64-bit."""
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        hi = f(x)
        x[idx] = orig - h
        lo = f(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * h)
        it.iternext()
    return grad


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7, what=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    bad = err > tol
    assert not bad.any(), (
        f"{what} gradient mismatch at {np.argwhere(bad)[:5]}: "
        f"analytic {analytic[bad][:5]} vs numeric {numeric[bad][:5]}")


@pytest.fixture
def rng():
    return Rng(20260810)
