import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("dacl", deadline=None, max_examples=40)
settings.load_profile("dacl")


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        dn = f(x)
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
