"""Rectangular minimum-cost linear assignment.

:func:`hungarian` is a shortest-augmenting-path solver in the Jonker-Volgenant
style: it keeps row and column potentials, grows one Dijkstra tree per row of
the smaller side, and augments along the cheapest path to a free column. No
padding is used for rectangular input; the matrix is oriented so that the
short side indexes the augmentations, giving O(R * C * min(R, C)) time.

:func:`brute_force` enumerates every injection and is the test oracle.
"""
from __future__ import annotations

import functools
import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import InvalidCostError, OracleTooLargeError

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

BRUTE_FORCE_CAP = 8


@dataclass(frozen=True)
class Assignment:
    """Injective row -> column matching, rows sorted ascending."""

    rows: np.ndarray
    cols: np.ndarray
    total_cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def __len__(self) -> int:
        return len(self.rows)

    @classmethod
    def empty(cls) -> "Assignment":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), 0.0)


def _check_cost(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidCostError(f"cost matrix must be 2-D, got shape {c.shape}")
    if c.shape[0] < 1 or c.shape[1] < 1:
        raise InvalidCostError(f"cost matrix must be non-empty, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidCostError("cost matrix contains non-finite entries")
    return c


def _make(c: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Assignment:
    order = np.argsort(rows, kind="stable")
    rows = rows[order].astype(np.int64)
    cols = cols[order].astype(np.int64)
    total = math.fsum(c[rows, cols].tolist())
    return Assignment(rows, cols, total)


def _solve_wide_numpy(c: np.ndarray) -> np.ndarray:
    """Solve with ``nr <= nc``; returns the column chosen for each row."""
    nr, nc = c.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    path = np.full(nc, -1, dtype=np.int64)
    col_index = np.arange(nc)

    for cur_row in range(nr):
        dist = np.full(nc, np.inf)
        remaining = np.ones(nc, dtype=bool)
        visited_rows = [cur_row]
        scanned_cols = []
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            reduced = min_val + c[i] - u[i] - v
            better = remaining & (reduced < dist)
            path[better] = i
            dist[better] = reduced[better]

            cand = np.where(remaining, dist, np.inf)
            lowest = cand.min()
            if not np.isfinite(lowest):
                raise InvalidCostError("no feasible augmenting path")
            ties = col_index[cand == lowest]
            free = ties[row4col[ties] < 0]
            j = int(free[0]) if len(free) else int(ties[0])

            min_val = lowest
            remaining[j] = False
            scanned_cols.append(j)
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])
                visited_rows.append(i)

        # potentials update keeps reduced costs nonnegative on the tree
        u[cur_row] += min_val
        for r in visited_rows[1:]:
            u[r] += min_val - dist[col4row[r]]
        sc = np.asarray(scanned_cols, dtype=np.int64)
        v[sc] -= min_val - dist[sc]

        j = sink
        while True:
            r = int(path[j])
            row4col[j] = r
            j, col4row[r] = col4row[r], j
            if r == cur_row:
                break
    return col4row


def _solve_wide_loops(c):
    """Same algorithm as :func:`_solve_wide_numpy` written as scalar loops for numba."""
    nr, nc = c.shape
    u = np.zeros(nr)
    v = np.zeros(nc)
    col4row = np.full(nr, -1, dtype=np.int64)
    row4col = np.full(nc, -1, dtype=np.int64)
    path = np.full(nc, -1, dtype=np.int64)
    dist = np.empty(nc)
    remaining = np.empty(nc, dtype=np.bool_)
    visited = np.empty(nr, dtype=np.int64)
    scanned = np.empty(nc, dtype=np.int64)

    for cur_row in range(nr):
        dist[:] = np.inf
        remaining[:] = True
        n_visited = 1
        visited[0] = cur_row
        n_scanned = 0
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            lowest = np.inf
            j_best = -1
            best_free = False
            for j in range(nc):
                if not remaining[j]:
                    continue
                r = min_val + c[i, j] - u[i] - v[j]
                if r < dist[j]:
                    path[j] = i
                    dist[j] = r
                dj = dist[j]
                free = row4col[j] < 0
                if dj < lowest or (dj == lowest and free and not best_free):
                    lowest = dj
                    j_best = j
                    best_free = free
            if j_best < 0 or lowest == np.inf:
                raise ValueError("no feasible augmenting path")
            min_val = lowest
            j = j_best
            remaining[j] = False
            scanned[n_scanned] = j
            n_scanned += 1
            if row4col[j] < 0:
                sink = j
            else:
                i = row4col[j]
                visited[n_visited] = i
                n_visited += 1

        u[cur_row] += min_val
        for k in range(1, n_visited):
            r = visited[k]
            u[r] += min_val - dist[col4row[r]]
        for k in range(n_scanned):
            j = scanned[k]
            v[j] -= min_val - dist[j]

        j = sink
        while True:
            r = path[j]
            row4col[j] = r
            nxt = col4row[r]
            col4row[r] = j
            j = nxt
            if r == cur_row:
                break
    return col4row


if numba is not None:
    _solve_wide = numba.njit(cache=True)(_solve_wide_loops)
else:  # pragma: no cover
    _solve_wide = _solve_wide_numpy


def hungarian(c) -> Assignment:
    """Minimum total cost assignment of size ``min(rows, cols)``.

    Deterministic for a fixed input. Raises :class:`InvalidCostError` on
    non-finite entries or empty dimensions.
    """
    c = _check_cost(c)
    nr, nc = c.shape
    if nr <= nc:
        cols = _solve_wide(np.ascontiguousarray(c))
        return _make(c, np.arange(nr), cols)
    rows = _solve_wide(np.ascontiguousarray(c.T))
    return _make(c, rows, np.arange(nc))


@functools.lru_cache(maxsize=64)
def _injections(short: int, long: int) -> np.ndarray:
    perms = np.array(list(itertools.permutations(range(long), short)), dtype=np.int64)
    perms.setflags(write=False)
    return perms


def brute_force(c) -> Assignment:
    """Exhaustive optimum over all injections of the short side into the long one."""
    c = _check_cost(c)
    nr, nc = c.shape
    if min(nr, nc) > BRUTE_FORCE_CAP:
        raise OracleTooLargeError(f"min dimension {min(nr, nc)} exceeds cap {BRUTE_FORCE_CAP}")
    transposed = nr > nc
    m = c.T if transposed else c
    short, long = m.shape
    perms = _injections(short, long)
    costs = m[np.arange(short)[None, :], perms].sum(axis=1)
    best = perms[int(np.argmin(costs))]
    if transposed:
        return _make(c, best, np.arange(short))
    return _make(c, np.arange(short), best)


def optimal_is_unique(c, rtol: float = 1e-9) -> bool:
    """True when the brute-force optimum beats every other injection by a margin."""
    c = _check_cost(c)
    m = c.T if c.shape[0] > c.shape[1] else c
    short, long = m.shape
    if short > BRUTE_FORCE_CAP:
        raise OracleTooLargeError(f"min dimension {short} exceeds cap {BRUTE_FORCE_CAP}")
    perms = _injections(short, long)
    costs = np.sort(m[np.arange(short)[None, :], perms].sum(axis=1))
    if len(costs) < 2:
        return True
    return costs[1] - costs[0] > rtol * max(1.0, abs(costs[0]))


def bench(rows: int, cols: int, batches: int, seed: int = 0) -> dict:
    """Time :func:`hungarian` on ``batches`` uniform random matrices.

    One untimed solve runs first so the compiled kernel is loaded before timing.
    """
    rng = np.random.default_rng(seed)
    hungarian(np.random.default_rng(seed).random((rows, cols)))
    times = np.empty(batches)
    for b in range(batches):
        c = rng.random((rows, cols))
        t0 = time.perf_counter()
        hungarian(c)
        times[b] = time.perf_counter() - t0
    return {
        "rows": rows,
        "cols": cols,
        "batches": batches,
        "seed": seed,
        "min_ms": float(times.min() * 1e3),
        "median_ms": float(np.median(times) * 1e3),
        "p99_ms": float(np.percentile(times, 99) * 1e3),
        "solves_per_sec": float(batches / times.sum()) if times.sum() > 0 else float("inf"),
    }
