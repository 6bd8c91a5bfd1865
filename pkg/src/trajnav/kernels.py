"""Numeric inner loops: DTW accumulation and all-pairs shortest paths.

Each kernel has a numba version and a plain numpy version. Numba is used when
it imports cleanly and ``TRAJNAV_DISABLE_NUMBA`` is unset (or "0").
"""
from __future__ import annotations

import os

import numpy as np

_disabled = os.environ.get("TRAJNAV_DISABLE_NUMBA", "0") not in ("", "0")

try:
    if _disabled:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference paths


def _dtw_table_numpy(cost):
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        # diagonal and vertical moves vectorise; the horizontal one is a scan
        best = np.minimum(acc[i - 1, :-1], acc[i - 1, 1:]) + cost[i - 1]
        row = acc[i]
        for j in range(1, m + 1):
            row[j] = min(best[j - 1], row[j - 1] + cost[i - 1, j - 1])
    return acc


def _floyd_warshall_numpy(weights):
    dist = weights.copy()
    n = dist.shape[0]
    np.fill_diagonal(dist, 0.0)
    for k in range(n):
        np.minimum(dist, dist[:, k, None] + dist[None, k, :], out=dist)
    return dist


# ---------------------------------------------------------------------------
# numba paths

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _dtw_table_numba(cost):
        n, m = cost.shape
        acc = np.full((n + 1, m + 1), np.inf)
        acc[0, 0] = 0.0
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = acc[i - 1, j - 1]
                if acc[i - 1, j] < best:
                    best = acc[i - 1, j]
                if acc[i, j - 1] < best:
                    best = acc[i, j - 1]
                acc[i, j] = cost[i - 1, j - 1] + best
        return acc

    @numba.njit(cache=True)
    def _floyd_warshall_numba(weights):
        dist = weights.copy()
        n = dist.shape[0]
        for i in range(n):
            dist[i, i] = 0.0
        for k in range(n):
            for i in range(n):
                dik = dist[i, k]
                if dik == np.inf:
                    continue
                for j in range(n):
                    alt = dik + dist[k, j]
                    if alt < dist[i, j]:
                        dist[i, j] = alt
        return dist


def dtw_table(cost, use_numba=None):
    """Accumulated DTW cost table with a zero origin row/column of padding.

    ``table[i, j]`` is the cheapest monotone alignment of the first i rows with
    the first j columns of ``cost``.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _dtw_table_numba(cost)
    return _dtw_table_numpy(cost)


def floyd_warshall(weights, use_numba=None):
    """All-pairs shortest path lengths; ``weights[i, j]`` is inf for non-edges."""
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _floyd_warshall_numba(weights)
    return _floyd_warshall_numpy(weights)
