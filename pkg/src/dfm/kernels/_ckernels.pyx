# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every output row depends only on its own input row and all reductions run
in index order, so results are identical whatever the batch size.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, fabs

cnp.import_array()

cdef double LN_EPS = 1e-5


def dense_rows(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t B = x.shape[0], n_in = x.shape[1], n_out = w.shape[1]
    if w.shape[0] != n_in or b.shape[0] != n_out:
        raise ValueError("dense_rows: shape mismatch")
    out = np.empty((B, n_out), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, i, j
    cdef double xi
    with nogil:
        for r in range(B):
            for j in range(n_out):
                o[r, j] = 0.0
            for i in range(n_in):
                xi = x[r, i]
                for j in range(n_out):
                    o[r, j] += xi * w[i, j]
            for j in range(n_out):
                o[r, j] += b[j]
    return out


def adaln_rows(
    const double[:, ::1] h,
    const double[:, ::1] cvec,
    const double[:, ::1] mod_w,
    const double[::1] mod_b,
    const double[:, ::1] fc1_w,
    const double[::1] fc1_b,
    const double[:, ::1] fc2_w,
    const double[::1] fc2_b,
):
    """h + alpha * fc2(silu(fc1(LN(h) * (1 + gamma) + beta))), per row."""
    cdef Py_ssize_t B = h.shape[0], H = h.shape[1], M = fc1_w.shape[1]
    if (cvec.shape[0] != B or cvec.shape[1] != H or mod_w.shape[0] != H
            or mod_w.shape[1] != 3 * H or fc1_w.shape[0] != H or fc2_w.shape[0] != M
            or fc2_w.shape[1] != H):
        raise ValueError("adaln_rows: shape mismatch")
    out = np.empty((B, H), dtype=np.float64)
    mod_buf = np.empty(3 * H, dtype=np.float64)
    u_buf = np.empty(H, dtype=np.float64)
    a_buf = np.empty(M, dtype=np.float64)
    z_buf = np.empty(H, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] mod = mod_buf
    cdef double[::1] u = u_buf
    cdef double[::1] a = a_buf
    cdef double[::1] z = z_buf
    cdef Py_ssize_t r, i, j
    cdef double mean, var, inv_std, ci, ui, ai, s
    with nogil:
        for r in range(B):
            for j in range(3 * H):
                mod[j] = 0.0
            for i in range(H):
                ci = cvec[r, i]
                for j in range(3 * H):
                    mod[j] += ci * mod_w[i, j]
            for j in range(3 * H):
                mod[j] += mod_b[j]

            mean = 0.0
            for i in range(H):
                mean += h[r, i]
            mean /= H
            var = 0.0
            for i in range(H):
                var += (h[r, i] - mean) * (h[r, i] - mean)
            var /= H
            inv_std = 1.0 / sqrt(var + LN_EPS)
            for i in range(H):
                u[i] = (h[r, i] - mean) * inv_std * (1.0 + mod[i]) + mod[H + i]

            for j in range(M):
                a[j] = 0.0
            for i in range(H):
                ui = u[i]
                for j in range(M):
                    a[j] += ui * fc1_w[i, j]
            for j in range(M):
                s = a[j] + fc1_b[j]
                a[j] = s / (1.0 + exp(-s))

            for j in range(H):
                z[j] = 0.0
            for i in range(M):
                ai = a[i]
                for j in range(H):
                    z[j] += ai * fc2_w[i, j]
            for j in range(H):
                o[r, j] = h[r, j] + mod[2 * H + j] * (z[j] + fc2_b[j])
    return out


def pair_sum_l1(const double[:, ::1] y):
    """sum_{i<j} sum_k |y_ik - y_jk|"""
    cdef Py_ssize_t n = y.shape[0], D = y.shape[1], i, j, k
    cdef double total = 0.0, row
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                row = 0.0
                for k in range(D):
                    row += fabs(y[i, k] - y[j, k])
                total += row
    return total


def pair_sum_euclid(const double[:, ::1] a):
    """sum_{i<j} ||a_i - a_j||_2"""
    cdef Py_ssize_t n = a.shape[0], D = a.shape[1], i, j, k
    cdef double total = 0.0, sq, diff
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                sq = 0.0
                for k in range(D):
                    diff = a[i, k] - a[j, k]
                    sq += diff * diff
                total += sqrt(sq)
    return total


def cross_sum_euclid(const double[:, ::1] a, const double[:, ::1] b):
    """sum_i sum_j ||a_i - b_j||_2"""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], D = a.shape[1], i, j, k
    if b.shape[1] != D:
        raise ValueError("cross_sum_euclid: dimension mismatch")
    cdef double total = 0.0, sq, diff
    with nogil:
        for i in range(n):
            for j in range(m):
                sq = 0.0
                for k in range(D):
                    diff = a[i, k] - b[j, k]
                    sq += diff * diff
                total += sqrt(sq)
    return total
