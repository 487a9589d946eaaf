"""Pure-Python (numpy) versions of the compiled kernels in ``_kernels.pyx``.

Both modules implement the same algorithms with the same tie rules, so an
installation without a C compiler produces identical assignments.
"""

from __future__ import annotations

import numpy as np


def solve_lsa(cost_in):
    """Min-cost injective assignment of rows to columns (rows <= columns).

    Returns ``col4row`` or ``None`` when no complete assignment exists.
    """
    cost = np.ascontiguousarray(cost_in, dtype=np.float64)
    if np.isnan(cost).any() or np.isneginf(cost).any():
        raise ValueError("cost matrix contains NaN or -inf")
    nr, nc = cost.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    path = np.full(nc, -1, dtype=np.intp)
    col4row = np.full(nr, -1, dtype=np.intp)
    row4col = np.full(nc, -1, dtype=np.intp)

    for cur in range(nr):
        spc = np.full(nc, np.inf)
        sr = np.zeros(nr, dtype=bool)
        sc = np.zeros(nc, dtype=bool)
        remaining = np.arange(nc)
        min_val = 0.0
        i = cur
        sink = -1
        while sink == -1:
            sr[i] = True
            r = min_val + cost[i, remaining] - u[i] - v[remaining]
            better = r < spc[remaining]
            upd = remaining[better]
            path[upd] = i
            spc[upd] = r[better]
            vals = spc[remaining]
            lowest = vals.min()
            if lowest == np.inf:
                return None
            ties = np.flatnonzero(vals == lowest)
            free = ties[row4col[remaining[ties]] == -1]
            index = int(free[0]) if free.size else int(ties[0])
            min_val = lowest
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            sc[j] = True
            # swap-remove, mirroring the compiled scan order
            remaining[index] = remaining[-1]
            remaining = remaining[:-1]
        u[cur] += min_val
        others = sr.copy()
        others[cur] = False
        u[others] += min_val - spc[col4row[others]]
        v[sc] -= min_val - spc[sc]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return col4row.astype(np.int64)


def _expand(runs):
    runs = np.asarray(runs, dtype=np.int64).reshape(-1, 3)
    lengths = runs[:, 2] - runs[:, 1]
    if lengths.sum() == 0:
        return np.empty(0, dtype=np.int64)
    rows = np.repeat(runs[:, 0], lengths)
    starts = np.repeat(runs[:, 1] - np.cumsum(lengths) + lengths, lengths)
    cols = starts + np.arange(lengths.sum())
    return (rows << 32) + cols


def rle_intersection(a_in, b_in):
    """Number of pixels shared by two sorted half-open run arrays (row, start, end)."""
    return int(np.intersect1d(_expand(a_in), _expand(b_in), assume_unique=True).size)
