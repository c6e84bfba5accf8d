# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for flip decisions and gate-grid count surfaces.

Mirrors nerp._kernels._reference exactly; all outputs are integers, so the
two backends are bit-identical.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def flip_targets(
    cnp.int64_t[::1] indptr,
    cnp.float64_t[::1] cand_sigma,
    cnp.float64_t[::1] cand_margin,
    double tau,
    double delta,
):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] out_v = out
    cdef Py_ssize_t s, c
    for s in range(n):
        for c in range(indptr[s], indptr[s + 1]):
            if cand_sigma[c] >= tau and cand_margin[c] <= delta:
                out_v[s] = c
                break
    return out


cdef Py_ssize_t _lower_bound(cnp.float64_t[::1] arr, double x) noexcept nogil:
    # first index with arr[idx] >= x  (numpy searchsorted side='left')
    cdef Py_ssize_t lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef Py_ssize_t _upper_bound(cnp.float64_t[::1] arr, double x) noexcept nogil:
    # first index with arr[idx] > x  (numpy searchsorted side='right')
    cdef Py_ssize_t lo = 0, hi = arr.shape[0], mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid] <= x:
            lo = mid + 1
        else:
            hi = mid
    return lo


def grid_flip_diffs(
    cnp.int64_t[::1] indptr,
    cnp.float64_t[::1] cand_sigma,
    cnp.float64_t[::1] cand_margin,
    cnp.uint8_t[::1] fix_flag,
    cnp.uint8_t[::1] brk_flag,
    cnp.float64_t[::1] tau_grid,
    cnp.float64_t[::1] delta_grid,
):
    cdef Py_ssize_t n_tau = tau_grid.shape[0]
    cdef Py_ssize_t n_delta = delta_grid.shape[0]
    d_flip = np.zeros((n_tau, n_delta + 1), dtype=np.int64)
    d_fix = np.zeros((n_tau, n_delta + 1), dtype=np.int64)
    d_brk = np.zeros((n_tau, n_delta + 1), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] fl = d_flip
    cdef cnp.int64_t[:, ::1] fx = d_fix
    cdef cnp.int64_t[:, ::1] bk = d_brk

    cover_arr = np.empty(n_tau, dtype=np.int64)
    cdef cnp.int64_t[::1] cover = cover_arr

    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t s, c, a, b, col, old
    cdef bint is_fix, is_brk
    for s in range(n):
        if indptr[s] == indptr[s + 1]:
            continue
        for col in range(n_tau):
            cover[col] = n_delta
        for c in range(indptr[s], indptr[s + 1]):
            a = _upper_bound(tau_grid, cand_sigma[c])
            if a == 0:
                continue
            b = _lower_bound(delta_grid, cand_margin[c])
            if b >= n_delta:
                continue
            is_fix = fix_flag[c] != 0
            is_brk = brk_flag[c] != 0
            for col in range(a):
                old = cover[col]
                if old <= b:
                    continue
                fl[col, b] += 1
                fl[col, old] -= 1
                if is_fix:
                    fx[col, b] += 1
                    fx[col, old] -= 1
                if is_brk:
                    bk[col, b] += 1
                    bk[col, old] -= 1
                cover[col] = b
    return d_flip, d_fix, d_brk
