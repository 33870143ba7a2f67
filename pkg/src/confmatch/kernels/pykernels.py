"""Pure-numpy reference implementations of the matching kernels.

Semantics are shared with the compiled backend: any divergence beyond
floating-point reassociation noise is a bug.
"""

import numpy as np


def dual_softmax(s):
    """Elementwise product of row-wise and column-wise softmax of `s` (n x m)."""
    s = np.asarray(s, dtype=np.float64)
    r = np.exp(s - s.max(axis=1, keepdims=True))
    r /= r.sum(axis=1, keepdims=True)
    c = np.exp(s - s.max(axis=0, keepdims=True))
    c /= c.sum(axis=0, keepdims=True)
    return r * c


def batched_dual_softmax(s):
    """dual_softmax applied independently to every matrix of a (B, n, m) stack."""
    s = np.asarray(s, dtype=np.float64)
    r = np.exp(s - s.max(axis=2, keepdims=True))
    r /= r.sum(axis=2, keepdims=True)
    c = np.exp(s - s.max(axis=1, keepdims=True))
    c /= c.sum(axis=1, keepdims=True)
    return r * c


def _mutual_mask(p, threshold):
    row_max = p.max(axis=-1, keepdims=True)
    col_max = p.max(axis=-2, keepdims=True)
    at_row_max = p == row_max
    at_col_max = p == col_max
    strict_row = at_row_max.sum(axis=-1, keepdims=True) == 1
    strict_col = at_col_max.sum(axis=-2, keepdims=True) == 1
    return at_row_max & at_col_max & strict_row & strict_col & (p >= threshold)


def mutual_pairs(p, threshold):
    """Indices (i, j) where p[i, j] is the strict maximum of both its row and
    its column and clears `threshold`.  Ties are dropped, so the result is
    one-to-one.  Returned sorted by i."""
    p = np.asarray(p, dtype=np.float64)
    rows, cols = np.nonzero(_mutual_mask(p, threshold))
    return rows.astype(np.int64), cols.astype(np.int64)


def batched_mutual_pairs(p, threshold):
    """mutual_pairs over a (B, n, m) stack; returns (batch, i, j) index arrays
    sorted by (batch, i)."""
    p = np.asarray(p, dtype=np.float64)
    b, rows, cols = np.nonzero(_mutual_mask(p, threshold))
    return b.astype(np.int64), rows.astype(np.int64), cols.astype(np.int64)


def softmax_expectation(scores, offsets, valid):
    """Per-row softmax over the valid entries of `scores` (B, K), then the
    expectation of `offsets` (B, K, 2) under those weights.  Rows with no
    valid entry yield a zero offset."""
    scores = np.asarray(scores, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    masked = np.where(valid, scores, -np.inf)
    top = np.where(valid.any(axis=1), masked.max(axis=1), 0.0)
    e = np.exp(masked - top[:, None])
    den = e.sum(axis=1, keepdims=True)
    w = e / np.where(den == 0.0, 1.0, den)
    return np.einsum("bk,bkd->bd", w, offsets)
