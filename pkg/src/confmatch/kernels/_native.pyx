# Compiled twin of pykernels.py.  Same contracts; fused loops instead of
# materialized numpy temporaries.

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, INFINITY

cnp.import_array()


def dual_softmax(s):
    s = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[:, ::1] sv = s
    cdef Py_ssize_t n = sv.shape[0], m = sv.shape[1]
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] p = out
    cdef double[::1] rmax = np.empty(n), rden = np.zeros(n)
    cdef double[::1] cmax = np.full(m, -INFINITY), cden = np.zeros(m)
    cdef Py_ssize_t i, j
    cdef double v, e1, e2

    for i in range(n):
        v = -INFINITY
        for j in range(m):
            if sv[i, j] > v:
                v = sv[i, j]
        rmax[i] = v
    for j in range(m):
        for i in range(n):
            if sv[i, j] > cmax[j]:
                cmax[j] = sv[i, j]
    # p holds exp(s - rmax) * exp(s - cmax); normalize by both sums afterwards
    for i in range(n):
        for j in range(m):
            e1 = exp(sv[i, j] - rmax[i])
            e2 = exp(sv[i, j] - cmax[j])
            rden[i] += e1
            cden[j] += e2
            p[i, j] = e1 * e2
    for i in range(n):
        for j in range(m):
            p[i, j] /= rden[i] * cden[j]
    return out


def batched_dual_softmax(s):
    s = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[:, :, ::1] sv = s
    cdef Py_ssize_t b = sv.shape[0], n = sv.shape[1], m = sv.shape[2]
    out = np.empty_like(s)
    cdef double[:, :, ::1] p = out
    rmax_a = np.empty(n)
    rden_a = np.empty(n)
    cmax_a = np.empty(m)
    cden_a = np.empty(m)
    cdef double[::1] rmax = rmax_a, rden = rden_a, cmax = cmax_a, cden = cden_a
    cdef Py_ssize_t k, i, j
    cdef double v, e1, e2

    for k in range(b):
        for i in range(n):
            v = -INFINITY
            for j in range(m):
                if sv[k, i, j] > v:
                    v = sv[k, i, j]
            rmax[i] = v
            rden[i] = 0.0
        for j in range(m):
            cmax[j] = -INFINITY
            cden[j] = 0.0
        for j in range(m):
            for i in range(n):
                if sv[k, i, j] > cmax[j]:
                    cmax[j] = sv[k, i, j]
        for i in range(n):
            for j in range(m):
                e1 = exp(sv[k, i, j] - rmax[i])
                e2 = exp(sv[k, i, j] - cmax[j])
                rden[i] += e1
                cden[j] += e2
                p[k, i, j] = e1 * e2
        for i in range(n):
            for j in range(m):
                p[k, i, j] /= rden[i] * cden[j]
    return out


cdef Py_ssize_t _mutual_fill(double[:, ::1] p, double threshold,
                             long long[::1] ri, long long[::1] ci) except -1:
    """Collect strict mutual row/column maxima >= threshold into ri/ci.

    Returns the number of pairs written.  ri/ci must hold min(n, m) slots.
    """
    cdef Py_ssize_t n = p.shape[0], m = p.shape[1]
    cdef Py_ssize_t i, j, cnt = 0
    cdef double v
    cdef Py_ssize_t arg, hits

    colmax = np.full(m, -INFINITY)
    colhits = np.zeros(m, dtype=np.int64)
    cdef double[::1] cm = colmax
    cdef long long[::1] ch = colhits
    for j in range(m):
        for i in range(n):
            if p[i, j] > cm[j]:
                cm[j] = p[i, j]
                ch[j] = 1
            elif p[i, j] == cm[j]:
                ch[j] += 1

    for i in range(n):
        v = -INFINITY
        arg = 0
        hits = 0
        for j in range(m):
            if p[i, j] > v:
                v = p[i, j]
                arg = j
                hits = 1
            elif p[i, j] == v:
                hits += 1
        if hits != 1 or v < threshold:
            continue
        if ch[arg] == 1 and p[i, arg] == cm[arg]:
            ri[cnt] = i
            ci[cnt] = arg
            cnt += 1
    return cnt


def mutual_pairs(p, threshold):
    p = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, ::1] pv = p
    cdef Py_ssize_t cap = min(pv.shape[0], pv.shape[1])
    rows = np.empty(cap, dtype=np.int64)
    cols = np.empty(cap, dtype=np.int64)
    cdef Py_ssize_t cnt = _mutual_fill(pv, threshold, rows, cols)
    return rows[:cnt].copy(), cols[:cnt].copy()


def batched_mutual_pairs(p, threshold):
    p = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, :, ::1] pv = p
    cdef Py_ssize_t b = pv.shape[0]
    cdef Py_ssize_t cap = min(pv.shape[1], pv.shape[2])
    batch = np.empty(b * cap, dtype=np.int64)
    rows = np.empty(b * cap, dtype=np.int64)
    cols = np.empty(b * cap, dtype=np.int64)
    cdef long long[::1] bv = batch, rv = rows, cv = cols
    scratch_r = np.empty(cap, dtype=np.int64)
    scratch_c = np.empty(cap, dtype=np.int64)
    cdef long long[::1] sr = scratch_r, sc = scratch_c
    cdef Py_ssize_t k, t, cnt, total = 0
    for k in range(b):
        cnt = _mutual_fill(pv[k], threshold, sr, sc)
        for t in range(cnt):
            bv[total] = k
            rv[total] = sr[t]
            cv[total] = sc[t]
            total += 1
    return batch[:total].copy(), rows[:total].copy(), cols[:total].copy()


def softmax_expectation(scores, offsets, valid):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.uint8)
    cdef double[:, ::1] sv = scores
    cdef double[:, :, ::1] ov = offsets
    cdef unsigned char[:, ::1] mv = valid
    cdef Py_ssize_t b = sv.shape[0], k = sv.shape[1]
    out = np.zeros((b, 2), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef Py_ssize_t i, j
    cdef double top, den, w, ex, ey

    for i in range(b):
        top = -INFINITY
        for j in range(k):
            if mv[i, j] and sv[i, j] > top:
                top = sv[i, j]
        if top == -INFINITY:
            continue
        den = 0.0
        ex = 0.0
        ey = 0.0
        for j in range(k):
            if not mv[i, j]:
                continue
            w = exp(sv[i, j] - top)
            den += w
            ex += w * ov[i, j, 0]
            ey += w * ov[i, j, 1]
        res[i, 0] = ex / den
        res[i, 1] = ey / den
    return out
