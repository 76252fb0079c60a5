import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsnet import _pykernels, kernels

ck = pytest.importorskip("lsnet._ckernels")

from conftest import random_segments


def test_backend_selected():
    assert kernels.BACKEND == "cython"


def test_pure_python_forced_by_env():
    code = "from lsnet import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, LSNET_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


coord = st.floats(-50, 600, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(coord, coord, coord, coord, st.integers(0, 30), st.integers(0, 30))
def test_clip_parity(x1, y1, x2, y2, r, c):
    box = (16.0 * c, 16.0 * r, 16.0 * c + 32, 16.0 * r + 32)
    assert _pykernels.clip_segment(x1, y1, x2, y2, *box) == ck.clip_segment(x1, y1, x2, y2, *box)


@settings(max_examples=300, deadline=None)
@given(st.integers(-5, 300), st.integers(-5, 300), st.integers(-5, 300), st.integers(-5, 300))
def test_bresenham_parity(x0, y0, x1, y1):
    assert np.array_equal(_pykernels.bresenham(x0, y0, x1, y1), ck.bresenham(x0, y0, x1, y1))


@pytest.mark.parametrize("seed", range(5))
def test_encode_parity(seed):
    rng = np.random.default_rng(seed)
    segs = random_segments(rng, 15, 256)
    a = _pykernels.encode_lattice(segs, 32, 16, 15, 15, 2.0)
    b = ck.encode_lattice(segs, 32, 16, 15, 15, 2.0)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("wl", [1, 2, 3, 4])
def test_rasterize_parity(wl):
    rng = np.random.default_rng(wl)
    segs = random_segments(rng, 12, 128)
    segs[0] = (-3, 5, 200, 140)  # endpoints outside the image are clamped
    confs = rng.uniform(size=12)
    a = _pykernels.rasterize_max(segs, confs, 128, 128, wl)
    b = ck.rasterize_max(segs, confs, 128, 128, wl)
    assert np.array_equal(a, b)
