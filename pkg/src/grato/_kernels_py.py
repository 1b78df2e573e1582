"""Pure-numpy edge kernels. Used when the compiled extension is unavailable.

All scatter reductions go through ``np.add.at`` / ``np.maximum.at``, which are
unbuffered and accumulate in edge order, so results are deterministic.
"""

import numpy as np


def spmm(rows, cols, weights, x, n_out):
    """out[r] += w * x[c] for every edge (r, c, w)."""
    out = np.zeros((n_out, x.shape[1]), dtype=np.float64)
    if rows.size:
        np.add.at(out, rows, weights[:, None] * x[cols])
    return out


def segment_sum(values, segments, n_segments):
    out = np.zeros(n_segments, dtype=np.float64)
    if segments.size:
        np.add.at(out, segments, values)
    return out


def segment_softmax(scores, segments, n_segments):
    if scores.size == 0:
        return np.zeros(0, dtype=np.float64)
    seg_max = np.full(n_segments, -np.inf)
    np.maximum.at(seg_max, segments, scores)
    shifted = np.exp(scores - seg_max[segments])
    denom = segment_sum(shifted, segments, n_segments)
    return shifted / denom[segments]


def edge_dot(rows, cols, a, b):
    """Per-edge inner product <a[r], b[c]>."""
    if rows.size == 0:
        return np.zeros(0, dtype=np.float64)
    return np.einsum("ij,ij->i", a[rows], b[cols])
