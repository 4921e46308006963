import numpy as np
import pytest

from satcalc.grid import BandStack, Grid2D


def pixel(b2=0.1, b3=0.1, b4=0.1, b8=0.1):
    """1x1 BandStack."""
    return BandStack.from_array(np.array([b2, b3, b4, b8], np.float32).reshape(4, 1, 1))


def value(g):
    assert g.valid.all()
    return float(g.values[0, 0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_bands(rng):
    cube = rng.uniform(0.0, 1.0, (4, 12, 10)).astype(np.float32)
    valid = rng.random((12, 10)) > 0.1
    return BandStack.from_array(cube, valid)


@pytest.fixture
def random_grid(rng):
    values = rng.normal(size=(7, 5)).astype(np.float32)
    valid = rng.random((7, 5)) > 0.2
    return Grid2D.from_array(values, valid)
