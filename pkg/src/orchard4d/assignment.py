"""Linear assignment with optional "leave unmatched" columns."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import AlgorithmError

UNMATCHED = -1


def linear_sum_assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching between rows and columns of a rectangular matrix.

    Every row is matched when ``rows <= cols`` (every column otherwise).
    ``inf`` entries are forbidden pairs. Returns ``(row_ind, col_ind)`` sorted
    by row, like :func:`scipy.optimize.linear_sum_assignment`.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if c.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    transposed = c.shape[0] > c.shape[1]
    if transposed:
        c = c.T
    col4row = kernels.solve_lsa(c)
    if col4row is None:
        raise AlgorithmError("cost matrix admits no complete assignment")
    rows = np.arange(c.shape[0], dtype=np.int64)
    if transposed:
        order = np.argsort(col4row, kind="stable")
        return col4row[order], rows[order]
    return rows, col4row


def assign_with_unmatched(cost, unmatched_cost) -> list[tuple[int, int]]:
    """Match rows to columns, letting a row stay unmatched at ``unmatched_cost``.

    ``cost`` is ``m x n``; the solver sees ``[cost | U]`` where ``U`` is an
    ``m x m`` block holding ``unmatched_cost`` (scalar or per row). Returns
    ``(row, col)`` for every row, with :data:`UNMATCHED` for the dummy block.
    """
    c = np.asarray(cost, dtype=np.float64)
    m, n = c.shape
    if m == 0:
        return []
    block = np.empty((m, m))
    block[:] = np.asarray(unmatched_cost, dtype=np.float64).reshape(-1, 1) if np.ndim(unmatched_cost) else unmatched_cost
    _, cols = linear_sum_assignment(np.hstack((c, block)))
    return [(i, int(j) if j < n else UNMATCHED) for i, j in enumerate(cols)]


def total_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[i, j] for i, j in pairs))
