"""Segment and scatter kernels with a compiled core and a numpy fallback.

The graph-attention inner loop spends nearly all its time in per-edge segment
reductions (softmax over each node's incoming edges, weighted row sums, and
the scatter-adds of their adjoints). Those are implemented twice: in Cython
(``cgsr._ckern``) and in pure numpy below. The backend is picked once at
import; set ``CGSR_NO_EXT=1`` to force the fallback. Both backends accumulate
in ascending edge order, so the accumulation ops agree bit-for-bit.

All functions assume validated inputs: float64 arrays, int64 ids sorted
non-decreasing, ids within [0, num_segments). Validation lives in the callers
(`cgsr.numcore`).
"""

import os

import numpy as np


def _np_seg_sum(x, ids, n):
    return np.bincount(ids, weights=x, minlength=n)


def _np_seg_max(x, ids, n):
    out = np.full(n, -np.inf)
    np.maximum.at(out, ids, x)
    return out


def _np_seg_softmax(scores, ids, n):
    shifted = scores - _np_seg_max(scores, ids, n)[ids]
    e = np.exp(shifted)
    denom = _np_seg_sum(e, ids, n)
    return e / denom[ids]


def _np_seg_softmax_backward(alpha, grad, ids, n):
    # d softmax: alpha * (g - sum_segment(g * alpha))
    t = alpha * grad
    return alpha * (grad - _np_seg_sum(t, ids, n)[ids])


def _np_seg_weighted_rowsum(values, w, ids, n):
    out = np.zeros((n, values.shape[1]))
    np.add.at(out, ids, values * w[:, None])
    return out


def _np_seg_weighted_rowsum_backward(values, w, ids, gout):
    picked = gout[ids]
    gvalues = picked * w[:, None]
    gw = (picked * values).sum(axis=1)
    return gvalues, gw


def _np_scatter_rows(out, idx, rows):
    np.add.at(out, idx, rows)


_FALLBACK = {
    "seg_sum": _np_seg_sum,
    "seg_max": _np_seg_max,
    "seg_softmax": _np_seg_softmax,
    "seg_softmax_backward": _np_seg_softmax_backward,
    "seg_weighted_rowsum": _np_seg_weighted_rowsum,
    "seg_weighted_rowsum_backward": _np_seg_weighted_rowsum_backward,
    "scatter_rows": _np_scatter_rows,
}

BACKEND = "numpy"
if not os.environ.get("CGSR_NO_EXT"):
    try:
        from . import _ckern

        BACKEND = "compiled"
    except ImportError:
        pass

if BACKEND == "compiled":
    seg_sum = _ckern.seg_sum
    seg_max = _ckern.seg_max
    seg_softmax = _ckern.seg_softmax
    seg_softmax_backward = _ckern.seg_softmax_backward
    seg_weighted_rowsum = _ckern.seg_weighted_rowsum
    seg_weighted_rowsum_backward = _ckern.seg_weighted_rowsum_backward
    scatter_rows = _ckern.scatter_rows
else:
    seg_sum = _np_seg_sum
    seg_max = _np_seg_max
    seg_softmax = _np_seg_softmax
    seg_softmax_backward = _np_seg_softmax_backward
    seg_weighted_rowsum = _np_seg_weighted_rowsum
    seg_weighted_rowsum_backward = _np_seg_weighted_rowsum_backward
    scatter_rows = _np_scatter_rows


def fallback_impl(name):
    """Pure-numpy implementation, regardless of the selected backend."""
    return _FALLBACK[name]
