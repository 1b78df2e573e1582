"""The compiled kernels must agree with the numpy fallback."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grato import _kernels_py, kernels

IMPLS = kernels.backends()
needs_cython = pytest.mark.skipif("cython" not in IMPLS, reason="compiled extension not built")


@st.composite
def edge_lists(draw):
    n = draw(st.integers(1, 12))
    e = draw(st.integers(0, 40))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    return n, rng.integers(0, n, e), rng.integers(0, n, e), rng.standard_normal(e), rng.standard_normal((n, 3))


@needs_cython
@settings(max_examples=60, deadline=None)
@given(edge_lists())
def test_cython_matches_python_on_random_edge_lists(case):
    n, rows, cols, w, x = case
    c, p = IMPLS["cython"], IMPLS["python"]
    assert np.allclose(c.spmm(rows, cols, w, x, n), p.spmm(rows, cols, w, x, n), rtol=1e-12, atol=1e-12)
    assert np.allclose(c.segment_sum(w, rows, n), p.segment_sum(w, rows, n), rtol=1e-12, atol=1e-12)
    assert np.allclose(c.segment_softmax(w, rows, n), p.segment_softmax(w, rows, n), rtol=1e-12, atol=1e-15)
    assert np.allclose(c.edge_dot(rows, cols, x, x), p.edge_dot(rows, cols, x, x), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_segment_softmax_ignores_huge_scores(name):
    out = IMPLS[name].segment_softmax(np.array([1e4, 1e4, -3.0]), np.array([0, 0, 1]), 2)
    assert np.allclose(out, [0.5, 0.5, 1.0])


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_kernels_handle_empty_inputs(name):
    m = IMPLS[name]
    z = np.zeros(0, np.int64)
    assert m.spmm(z, z, np.zeros(0), np.ones((3, 2)), 3).shape == (3, 2)
    assert m.segment_softmax(np.zeros(0), z, 4).shape == (0,)
    assert m.edge_dot(z, z, np.ones((2, 2)), np.ones((2, 2))).shape == (0,)


def test_wrappers_coerce_dtypes():
    out = kernels.spmm([0, 1], [1, 0], [1, 2], np.array([[1, 2], [3, 4]], dtype=np.int32), 2)
    assert out.dtype == np.float64 and np.array_equal(out, [[3.0, 4.0], [2.0, 4.0]])


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
    assert IMPLS["python"] is _kernels_py


def test_pure_python_switch_selects_fallback():
    env = {**os.environ, "GRATO_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from grato import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
