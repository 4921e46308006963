"""The numba loops and the numpy fallbacks must agree bit-for-bit."""
import os
import subprocess
import sys

import numpy as np
import pytest

from satcalc import _accel, kernels

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def same(a, b):
    assert a.dtype == b.dtype and a.shape == b.shape
    assert a.tobytes() == b.tobytes()


@pytest.fixture
def bands():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, 5000)
    a[:10] = 0.0
    b = rng.uniform(0, 1, 5000)
    b[:5] = 0.0
    c = rng.uniform(0, 0.3, 5000)
    valid = rng.random(5000) > 0.05
    return a, b, c, valid


def test_normalized_difference(bands):
    a, b, _, valid = bands
    for x, y in zip(kernels.normalized_difference_nb(a, b, valid, 1e-8),
                    kernels.normalized_difference_np(a, b, valid, 1e-8)):
        same(x, y)


def test_savi(bands):
    a, b, _, valid = bands
    for L in (0.0, 0.5):
        for x, y in zip(kernels.savi_nb(a, b, valid, L, 1e-8), kernels.savi_np(a, b, valid, L, 1e-8)):
            same(x, y)


def test_evi(bands):
    a, b, c, valid = bands
    args = (2.5, 6.0, 7.5, 1.0, 1e-8)
    for x, y in zip(kernels.evi_nb(a, b, c, valid, *args), kernels.evi_np(a, b, c, valid, *args)):
        same(x, y)


@pytest.mark.parametrize("shape,out", [((7, 5), (14, 10)), ((9, 9), (4, 5)), ((3, 8), (3, 8)), ((1, 4), (3, 1))])
def test_bilinear(shape, out):
    rng = np.random.default_rng(9)
    v = rng.normal(size=shape).astype(np.float32)
    valid = rng.random(shape) > 0.15
    for x, y in zip(kernels.bilinear_nb(v, valid, *out), kernels.bilinear_np(v, valid, *out)):
        same(x, y)


def test_lattice_interp():
    rng = np.random.default_rng(2)
    lattice = rng.random((8, 9))
    for cell in (5.0, 6.4, 32.0 / 3.0):
        same(kernels.lattice_interp_nb(lattice, 30, 32, cell), kernels.lattice_interp_np(lattice, 30, 32, cell))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_update(dtype):
    rng = np.random.default_rng(3)
    p0 = rng.normal(size=1000).astype(dtype)
    states = []
    for fn in (kernels.adam_update_nb, kernels.adam_update_np):
        p, m, v = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
        for step in range(1, 4):
            g = np.random.default_rng(step).normal(size=1000).astype(dtype)
            ty = p.dtype.type
            fn(p, g, m, v, ty(1e-3), ty(0.9), ty(0.999), ty(1e-8),
               ty(1 - 0.9 ** step), ty(1 - 0.999 ** step), ty(0.1), ty(0.001))
        states.append((p, m, v))
    for x, y in zip(*states):
        same(x, y)


def test_env_flag_selects_numpy():
    code = "from satcalc import backend, kernels; print(backend(), kernels.savi is kernels.savi_np)"
    env = dict(os.environ, SATCALC_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]
    env.pop("SATCALC_NO_NUMBA")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numba", "False"]
