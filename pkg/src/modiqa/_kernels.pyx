# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Must stay call-compatible with ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def kendall_counts(x, y):
    """Return ``(concordant - discordant, pairs tied in x, pairs tied in y)``."""
    cdef cnp.float64_t[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.float64_t[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t i, j
    cdef double dx, dy
    cdef long long s = 0, tx = 0, ty = 0
    if yv.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {yv.shape[0]}")
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                dx = xv[i] - xv[j]
                dy = yv[i] - yv[j]
                if dx == 0:
                    tx += 1
                if dy == 0:
                    ty += 1
                if dx != 0 and dy != 0:
                    if (dx > 0) == (dy > 0):
                        s += 1
                    else:
                        s -= 1
    return int(s), int(tx), int(ty)


def box_mean(a, int p):
    """Mean over every ``p x p`` window of a 2-D array (valid positions only)."""
    cdef cnp.float64_t[:, ::1] src = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1]
    if p < 1 or p > h or p > w:
        raise ValueError(f"window {p} does not fit array of shape {(h, w)}")
    cdef Py_ssize_t ho = h - p + 1, wo = w - p + 1
    cdef cnp.ndarray[cnp.float64_t, ndim=2] colsum_arr = np.empty((ho, w), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = np.empty((ho, wo), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] colsum = colsum_arr
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, inv = 1.0 / (p * p)
    with nogil:
        # vertical running sums, recomputed per output row to avoid drift
        for i in range(ho):
            for j in range(w):
                acc = 0.0
                for k in range(p):
                    acc = acc + src[i + k, j]
                colsum[i, j] = acc
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for k in range(p):
                    acc = acc + colsum[i, j + k]
                out[i, j] = acc * inv
    return out_arr


def pairwise_rank(pred, target, double eps):
    """Summed pairwise ranking loss over all ``i < j`` and its gradient in ``pred``."""
    cdef cnp.float64_t[::1] yp = np.ascontiguousarray(pred, dtype=np.float64)
    cdef cnp.float64_t[::1] yt = np.ascontiguousarray(target, dtype=np.float64)
    cdef Py_ssize_t n = yp.shape[0]
    if yt.shape[0] != n:
        raise ValueError(f"length mismatch: {n} vs {yt.shape[0]}")
    cdef cnp.ndarray[cnp.float64_t, ndim=1] grad_arr = np.zeros(n, dtype=np.float64)
    cdef cnp.float64_t[::1] grad = grad_arr
    cdef Py_ssize_t i, j
    cdef double dt, dp, w, val, total = 0.0
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                dt = yt[i] - yt[j]
                dp = yp[i] - yp[j]
                w = dt / (fabs(dt) + eps)
                val = -w * dp
                if val > 0:
                    total = total + val
                    grad[i] = grad[i] - w
                    grad[j] = grad[j] + w
    return total, grad_arr
