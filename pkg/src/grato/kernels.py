"""Edge-kernel backend selection.

The compiled Cython core is used when it was built; otherwise the numpy
fallback is loaded. Setting ``GRATO_PURE_PYTHON=1`` forces the fallback.
"""

import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("GRATO_PURE_PYTHON", "").strip() not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _idx(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def spmm(rows, cols, weights, x, n_out):
    return _impl.spmm(_idx(rows), _idx(cols), _f64(weights), _f64(x), int(n_out))


def segment_sum(values, segments, n_segments):
    return _impl.segment_sum(_f64(values), _idx(segments), int(n_segments))


def segment_softmax(scores, segments, n_segments):
    return _impl.segment_softmax(_f64(scores), _idx(segments), int(n_segments))


def edge_dot(rows, cols, a, b):
    return _impl.edge_dot(_idx(rows), _idx(cols), _f64(a), _f64(b))


def backends():
    """Map of backend name to kernel module, for cross-checking and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
