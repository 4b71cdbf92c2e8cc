"""Pure-numpy implementations of the routing kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled kernels are tested against. Every top-k here breaks ties by the
lower index.
"""

from __future__ import annotations

import numpy as np


def topk_indices(values, k):
    """Indices of the ``k`` largest entries, largest first."""
    values = np.asarray(values, dtype=np.float64)
    k = min(int(k), values.shape[0])
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    return np.argsort(-values, kind="stable")[:k].astype(np.int64)


def topk_rows(matrix, k):
    """Row-wise :func:`topk_indices` for a 2-D array, shape ``(rows, k)``."""
    matrix = np.asarray(matrix, dtype=np.float64)
    k = min(int(k), matrix.shape[1])
    if k <= 0:
        return np.empty((matrix.shape[0], 0), dtype=np.int64)
    return np.argsort(-matrix, axis=1, kind="stable")[:, :k].astype(np.int64)


def route_counts(matrix, k, rows=None):
    """Per-column count of how many selected rows have that column in their top-k.

    ``rows`` restricts the count to a subset of row indices; ``None`` counts all.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    n_cols = matrix.shape[1]
    if rows is not None:
        matrix = matrix[np.asarray(rows, dtype=np.int64)]
    if matrix.shape[0] == 0:
        return np.zeros(n_cols, dtype=np.int64)
    top = topk_rows(matrix, k)
    return np.bincount(top.ravel(), minlength=n_cols).astype(np.int64)


def topk_overlap(a, b, k):
    """Per-row size of the intersection of the top-k sets of ``a`` and ``b``."""
    ta = topk_rows(a, k)
    tb = topk_rows(b, k)
    n_cols = np.asarray(a).shape[1]
    out = np.zeros(ta.shape[0], dtype=np.int64)
    for i in range(ta.shape[0]):
        mark = np.zeros(n_cols, dtype=bool)
        mark[ta[i]] = True
        out[i] = int(mark[tb[i]].sum())
    return out
