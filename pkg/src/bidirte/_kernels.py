"""Span-pairing kernels used by decoding.

Two implementations with identical results: a numba ``@njit`` path and a
pure-numpy path. Set ``BIDIRTE_DISABLE_NUMBA=1`` (or ``NUMBA_DISABLE_JIT=1``)
to force the numpy path; it is also used when numba is not importable.
"""
from __future__ import annotations

import os
from bisect import bisect_left

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAS_NUMBA and not (_flag("BIDIRTE_DISABLE_NUMBA") or _flag("NUMBA_DISABLE_JIT"))


# --------------------------------------------------------------------------
# numpy reference path


def pair_spans_numpy(p_start: np.ndarray, p_end: np.ndarray, theta: float) -> np.ndarray:
    starts = np.flatnonzero(p_start >= theta)
    ends = np.flatnonzero(p_end >= theta).tolist()
    out = []
    for s in starts.tolist():
        i = bisect_left(ends, s)
        if i < len(ends):
            out.append((s, ends.pop(i)))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def decode_grid_numpy(start_grid: np.ndarray, end_grid: np.ndarray, theta: float,
                      row_mask: np.ndarray) -> np.ndarray:
    hot = (start_grid >= theta).any(axis=1) & (end_grid >= theta).any(axis=1) & row_mask
    out = []
    for k in np.flatnonzero(hot).tolist():
        for s, e in pair_spans_numpy(start_grid[k], end_grid[k], theta).tolist():
            out.append((k, s, e))
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)


# --------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @numba.njit(cache=True)
    def _pair_row(p_start, p_end, theta, used, out, k, row, with_row):
        n = p_start.shape[0]
        for j in range(n):
            used[j] = False
        for s in range(n):
            if p_start[s] >= theta:
                for e in range(s, n):
                    if not used[e] and p_end[e] >= theta:
                        used[e] = True
                        if with_row:
                            out[k, 0] = row
                            out[k, 1] = s
                            out[k, 2] = e
                        else:
                            out[k, 0] = s
                            out[k, 1] = e
                        k += 1
                        break
        return k

    @numba.njit(cache=True)
    def pair_spans_numba(p_start, p_end, theta):
        n = p_start.shape[0]
        used = np.zeros(n, dtype=np.bool_)
        out = np.empty((n, 2), dtype=np.int64)
        k = _pair_row(p_start, p_end, theta, used, out, 0, 0, False)
        return out[:k].copy()

    @numba.njit(cache=True)
    def decode_grid_numba(start_grid, end_grid, theta, row_mask):
        r, n = start_grid.shape
        used = np.zeros(n, dtype=np.bool_)
        out = np.empty((r * n, 3), dtype=np.int64)
        k = 0
        for row in range(r):
            if row_mask[row]:
                k = _pair_row(start_grid[row], end_grid[row], theta, used, out, k, row, True)
        return out[:k].copy()


def pair_spans_array(p_start, p_end, theta: float) -> np.ndarray:
    """(k, 2) array of inclusive (start, end) pairs."""
    p_start = np.ascontiguousarray(p_start, dtype=np.float64)
    p_end = np.ascontiguousarray(p_end, dtype=np.float64)
    if p_start.shape != p_end.shape:
        raise ValueError(f"start/end length mismatch: {p_start.shape} vs {p_end.shape}")
    if USE_NUMBA:
        return pair_spans_numba(p_start, p_end, float(theta))
    return pair_spans_numpy(p_start, p_end, theta)


def decode_grid_array(start_grid, end_grid, theta: float, row_mask=None) -> np.ndarray:
    """(k, 3) array of (relation, start, end) over every enabled grid row."""
    start_grid = np.ascontiguousarray(start_grid, dtype=np.float64)
    end_grid = np.ascontiguousarray(end_grid, dtype=np.float64)
    if start_grid.shape != end_grid.shape or start_grid.ndim != 2:
        raise ValueError(f"grids must share an (r, l) shape, got {start_grid.shape} and {end_grid.shape}")
    if row_mask is None:
        row_mask = np.ones(start_grid.shape[0], dtype=np.bool_)
    row_mask = np.ascontiguousarray(row_mask, dtype=np.bool_)
    if USE_NUMBA:
        return decode_grid_numba(start_grid, end_grid, float(theta), row_mask)
    return decode_grid_numpy(start_grid, end_grid, theta, row_mask)
