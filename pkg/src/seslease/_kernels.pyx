# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def distflow_sweep(const long[:] parent, const long[:] order, const double[:] r,
                   const double[:] x, const double[:, :] p, const double[:, :] q,
                   const double[:] v_set):
    cdef Py_ssize_t n_rows = p.shape[0], n = p.shape[1]
    cdef Py_ssize_t s, k, j, i
    cdef double[:, :] ps = np.array(p, dtype=np.float64, copy=True)
    cdef double[:, :] qs = np.array(q, dtype=np.float64, copy=True)
    out = np.empty((n_rows, n), dtype=np.float64)
    cdef double[:, :] v = out
    for s in range(n_rows):
        for k in range(n - 1, 0, -1):
            j = order[k]
            i = parent[j]
            ps[s, i] += ps[s, j]
            qs[s, i] += qs[s, j]
        v[s, order[0]] = v_set[s]
        for k in range(1, n):
            j = order[k]
            v[s, j] = v[s, parent[j]] + 2.0 * (r[j] * ps[s, j] + x[j] * qs[s, j])
    return out


def merit_order_fill(prices_in, quantities_in, double demand):
    cdef double[:] prices = np.ascontiguousarray(prices_in, dtype=np.float64)
    cdef double[:] qty = np.ascontiguousarray(quantities_in, dtype=np.float64)
    cdef Py_ssize_t n = prices.shape[0], i = 0, j, m
    awards_arr = np.zeros(n, dtype=np.float64)
    cdef double[:] awards = awards_arr
    cdef double remaining = demand, cap, price
    if n == 0:
        return float("nan"), awards_arr
    if remaining <= 0.0:
        return prices[0], awards_arr
    price = prices[n - 1]
    while i < n:
        j = i
        cap = 0.0
        while j < n and prices[j] == prices[i]:
            cap += qty[j]
            j += 1
        if cap >= remaining:
            if cap > 0.0:
                for m in range(i, j):
                    awards[m] = qty[m] * (remaining / cap)
            price = prices[i]
            break
        for m in range(i, j):
            awards[m] = qty[m]
        remaining -= cap
        i = j
    return price, awards_arr
