# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: rectangular assignment and RLE run intersection."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, isnan

cnp.import_array()


cdef Py_ssize_t _augment(const double[:, ::1] cost, Py_ssize_t nc, Py_ssize_t cur,
                         double[::1] u, double[::1] v, Py_ssize_t[::1] path,
                         Py_ssize_t[::1] row4col, double[::1] spc,
                         char[::1] sr, char[::1] sc, Py_ssize_t[::1] remaining,
                         double* min_out) nogil:
    cdef Py_ssize_t it, j, i = cur, index, sink = -1, num_remaining = nc
    cdef double min_val = 0.0, lowest, r
    cdef bint picked_free
    for it in range(nc):
        remaining[it] = it
        spc[it] = INFINITY
        sc[it] = 0
    for it in range(u.shape[0]):
        sr[it] = 0
    while sink == -1:
        index = -1
        lowest = INFINITY
        picked_free = False
        sr[i] = 1
        for it in range(num_remaining):
            j = remaining[it]
            r = min_val + cost[i, j] - u[i] - v[j]
            if r < spc[j]:
                path[j] = i
                spc[j] = r
            # ties: first unassigned column in scan order, else first column
            if spc[j] < lowest:
                lowest = spc[j]
                index = it
                picked_free = row4col[j] == -1
            elif spc[j] == lowest and not picked_free and row4col[j] == -1:
                index = it
                picked_free = True
        min_val = lowest
        if min_val == INFINITY:
            return -1
        j = remaining[index]
        if row4col[j] == -1:
            sink = j
        else:
            i = row4col[j]
        sc[j] = 1
        num_remaining -= 1
        remaining[index] = remaining[num_remaining]
    min_out[0] = min_val
    return sink


def solve_lsa(cost_in):
    """Min-cost injective assignment of rows to columns (rows <= columns).

    Shortest augmenting path with dual potentials. ``inf`` marks a forbidden
    pair. Returns ``col4row`` (int64), or ``None`` when no complete assignment
    of the rows exists.
    """
    cdef double[:, ::1] cost = np.ascontiguousarray(cost_in, dtype=np.float64)
    cdef Py_ssize_t nr = cost.shape[0], nc = cost.shape[1]
    cdef Py_ssize_t cur, i, j, tmp, sink = 0
    cdef double min_val = 0.0
    for i in range(nr):
        for j in range(nc):
            if isnan(cost[i, j]) or cost[i, j] == -INFINITY:
                raise ValueError("cost matrix contains NaN or -inf")
    u_a = np.zeros(nr)
    v_a = np.zeros(nc)
    spc_a = np.empty(nc)
    path_a = np.full(nc, -1, dtype=np.intp)
    col4row_a = np.full(nr, -1, dtype=np.intp)
    row4col_a = np.full(nc, -1, dtype=np.intp)
    sr_a = np.zeros(nr, dtype=np.int8)
    sc_a = np.zeros(nc, dtype=np.int8)
    rem_a = np.empty(nc, dtype=np.intp)
    cdef double[::1] u = u_a, v = v_a, spc = spc_a
    cdef Py_ssize_t[::1] path = path_a, col4row = col4row_a, row4col = row4col_a, remaining = rem_a
    cdef char[::1] sr = sr_a, sc = sc_a
    with nogil:
        for cur in range(nr):
            sink = _augment(cost, nc, cur, u, v, path, row4col, spc, sr, sc, remaining, &min_val)
            if sink < 0:
                break
            u[cur] += min_val
            for i in range(nr):
                if sr[i] and i != cur:
                    u[i] += min_val - spc[col4row[i]]
            for j in range(nc):
                if sc[j]:
                    v[j] -= min_val - spc[j]
            j = sink
            while True:
                i = path[j]
                row4col[j] = i
                tmp = col4row[i]
                col4row[i] = j
                j = tmp
                if i == cur:
                    break
    if sink < 0:
        return None
    return col4row_a.astype(np.int64)


def rle_intersection(a_in, b_in):
    """Number of pixels shared by two sorted half-open run arrays (row, start, end)."""
    cdef const int[:, ::1] a = np.ascontiguousarray(a_in, dtype=np.int32)
    cdef const int[:, ::1] b = np.ascontiguousarray(b_in, dtype=np.int32)
    cdef Py_ssize_t i = 0, k = 0, na = a.shape[0], nb = b.shape[0]
    cdef long total = 0
    cdef int lo, hi
    with nogil:
        while i < na and k < nb:
            if a[i, 0] < b[k, 0]:
                i += 1
            elif a[i, 0] > b[k, 0]:
                k += 1
            else:
                lo = a[i, 1] if a[i, 1] > b[k, 1] else b[k, 1]
                hi = a[i, 2] if a[i, 2] < b[k, 2] else b[k, 2]
                if hi > lo:
                    total += hi - lo
                if a[i, 2] < b[k, 2]:
                    i += 1
                else:
                    k += 1
    return total
