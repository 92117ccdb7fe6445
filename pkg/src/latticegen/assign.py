"""Cost matrices and linear assignment solvers.

Three solvers share one result type:

* ``solve_hungarian`` -- exact, O(n^3) shortest augmenting paths with row/column
  potentials, followed by a pass that picks the lexicographically smallest
  mapping among optimal ones;
* ``solve_greedy`` -- each row in index order takes its cheapest free column;
* ``solve_brute_force`` -- exhaustive search, used as a test oracle.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .errors import CapacityError, NumericError, ShapeError

METHODS = ("hungarian", "greedy", "brute_force")
BRUTE_FORCE_MAX_N = 9


@dataclass(frozen=True, eq=False)
class Assignment:
    mapping: np.ndarray  # mapping[i] = column assigned to row i
    method: str
    total_cost: float


def check_cost_matrix(c) -> np.ndarray:
    c = np.ascontiguousarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-d, got shape {c.shape}")
    n_rows, n_cols = c.shape
    if n_rows < 1 or n_rows > n_cols:
        raise ShapeError(f"cost matrix needs 1 <= rows <= cols, got {c.shape}")
    if not np.all(np.isfinite(c)):
        i, k = np.argwhere(~np.isfinite(c))[0]
        raise NumericError(f"non-finite cost at ({i}, {k})")
    if np.any(c < 0):
        i, k = np.argwhere(c < 0)[0]
        raise ValueError(f"negative cost {c[i, k]} at ({i}, {k})")
    return c


def mapping_cost(c: np.ndarray, mapping: np.ndarray) -> float:
    """Sum of ``c[i, mapping[i]]`` accumulated in row order."""
    total = 0.0
    for i, j in enumerate(mapping):
        total += float(c[i, j])
    return total


def _pad_square(c: np.ndarray) -> np.ndarray:
    n_rows, n_cols = c.shape
    if n_rows == n_cols:
        return c
    return np.vstack([c, np.zeros((n_cols - n_rows, n_cols))])


# ---------------------------------------------------------------------------
# Hungarian


@numba.njit(cache=True)
def _shortest_augmenting_path(cost):
    # 1-based potentials; col_owner[j] = row matched to column j (0 = free)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_owner = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.zeros(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        col_owner[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = col_owner[j0]
            delta = np.inf
            j1 = 0
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    # among equal minima a free column ends the search at once
                    if minv[j] < delta or (minv[j] == delta and col_owner[j] == 0 and col_owner[j1] != 0):
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[col_owner[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if col_owner[j0] == 0:
                break
        while True:
            j1 = way[j0]
            col_owner[j0] = col_owner[j1]
            j0 = j1
            if j0 == 0:
                break
    row_match = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_match[col_owner[j] - 1] = j - 1
    return row_match, u[1:].copy(), v[1:].copy()


@numba.njit(cache=True)
def _lexicographic_canonical(cost, row_match, u, v, tol):
    """Rotate an optimal matching to the lexicographically smallest optimal one.

    Optimal matchings are perfect matchings on the tight edges (reduced cost
    within ``tol``). Rows are fixed in order; for each row we try tight columns
    below its current one and look for the alternating cycle with the smallest
    exact cost change, accepting it when that change is <= 0.
    """
    n = cost.shape[0]
    owner = np.empty(n, dtype=np.int64)
    for i in range(n):
        owner[row_match[i]] = i
    pred_row = np.empty(n, dtype=np.int64)
    via_col = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    pushes = np.zeros(n, dtype=np.int64)
    queued = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n + 1, dtype=np.int64)
    path_rows = np.empty(n, dtype=np.int64)
    path_cols = np.empty(n, dtype=np.int64)
    for i in range(n):
        target = row_match[i]
        for j in range(target):
            k = owner[j]
            if k < i or cost[i, j] - u[i] - v[j] > tol:
                continue
            # i takes j, so k needs a new column; find the cheapest tight
            # alternating path from k that ends by taking i's old column
            dist[:] = np.inf
            pushes[:] = 0
            queued[:] = False
            dist[k] = 0.0
            queue[0] = k
            queued[k] = True
            head, size = 0, 1
            best = np.inf
            found = -1
            while size > 0:
                r = queue[head]
                head = (head + 1) % (n + 1)
                size -= 1
                queued[r] = False
                base = dist[r] - cost[r, row_match[r]]
                for c in range(n):
                    if c == j or c == row_match[r]:
                        continue
                    nxt = owner[c]
                    if nxt < i or nxt == k or cost[r, c] - u[r] - v[c] > tol:
                        continue
                    w = base + cost[r, c]
                    if c == target:
                        if w < best:
                            best = w
                            found = r
                        continue
                    if w < dist[nxt]:
                        dist[nxt] = w
                        pred_row[nxt] = r
                        via_col[nxt] = c
                        # bound relabels so a rounding-level negative cycle cannot spin
                        if not queued[nxt] and pushes[nxt] < n:
                            pushes[nxt] += 1
                            queued[nxt] = True
                            queue[(head + size) % (n + 1)] = nxt
                            size += 1
            if found < 0:
                continue
            path_rows[0] = found
            path_cols[0] = target
            m = 1
            x = found
            ok = True
            while x != k:
                if m >= n:
                    ok = False
                    break
                path_rows[m] = pred_row[x]
                path_cols[m] = via_col[x]
                m += 1
                x = pred_row[x]
            if not ok:
                continue
            delta = cost[i, j] - cost[i, target]
            for t in range(m):
                r = path_rows[t]
                delta += cost[r, path_cols[t]] - cost[r, row_match[r]]
            if delta > 0.0:
                continue
            for t in range(m):
                row_match[path_rows[t]] = path_cols[t]
                owner[path_cols[t]] = path_rows[t]
            row_match[i] = j
            owner[j] = i
            break
    return row_match


def solve_hungarian(c) -> Assignment:
    c = check_cost_matrix(c)
    n_rows = c.shape[0]
    square = _pad_square(c)
    row_match, u, v = _shortest_augmenting_path(square)
    scale = float(np.max(square)) if square.size else 0.0
    tol = 1e-9 * (1.0 + scale)
    row_match = _lexicographic_canonical(square, row_match, u, v, tol)
    mapping = row_match[:n_rows].copy()
    return Assignment(mapping, "hungarian", mapping_cost(c, mapping))


# ---------------------------------------------------------------------------
# Greedy


@numba.njit(cache=True)
def _greedy(cost):
    n_rows, n_cols = cost.shape
    taken = np.zeros(n_cols, dtype=np.bool_)
    mapping = np.empty(n_rows, dtype=np.int64)
    for i in range(n_rows):
        best = np.inf
        star = -1
        for j in range(n_cols):
            if not taken[j] and cost[i, j] < best:
                best = cost[i, j]
                star = j
        mapping[i] = star
        taken[star] = True
    return mapping


def solve_greedy(c) -> Assignment:
    c = check_cost_matrix(c)
    mapping = _greedy(c)
    return Assignment(mapping, "greedy", mapping_cost(c, mapping))


# ---------------------------------------------------------------------------
# Brute force


@lru_cache(maxsize=None)
def _permutations(n: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def solve_brute_force(c) -> Assignment:
    c = check_cost_matrix(c)
    n_rows, n_cols = c.shape
    if n_rows != n_cols:
        raise ShapeError("brute force needs a square cost matrix")
    if n_rows > BRUTE_FORCE_MAX_N:
        raise CapacityError(f"brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n_rows}")
    perms = _permutations(n_rows)
    totals = np.zeros(len(perms))
    for i in range(n_rows):
        totals += c[i, perms[:, i]]
    # permutations are in lexicographic order, argmin returns the first minimum
    mapping = perms[int(np.argmin(totals))].copy()
    return Assignment(mapping, "brute_force", mapping_cost(c, mapping))


SOLVERS = {
    "hungarian": solve_hungarian,
    "greedy": solve_greedy,
    "brute_force": solve_brute_force,
}


def solve(c, method: str) -> Assignment:
    try:
        solver = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown assignment method {method!r}") from None
    return solver(c)


# ---------------------------------------------------------------------------
# Cost matrices


def build_cost_matrix(data, params, lattice, loss) -> np.ndarray:
    """``C[i, k] = loss(data[i], decoder(lattice[k]))``, decoding each lattice row once."""
    from .metrics import pairwise_loss
    from .tensorcore import forward

    points = lattice.points if hasattr(lattice, "points") else np.asarray(lattice)
    data = np.asarray(data, dtype=np.float64)
    if points.shape[1] != params.input_dim:
        raise ShapeError(
            f"lattice dimension {points.shape[1]} != decoder input width {params.input_dim}"
        )
    if data.ndim != 2 or data.shape[1] != params.output_dim:
        raise ShapeError(
            f"data shape {data.shape} does not match decoder output width {params.output_dim}"
        )
    decoded = forward(params, points)
    c = pairwise_loss(loss, data, decoded)
    bad = ~np.isfinite(c)
    if bad.any():
        i, k = np.argwhere(bad)[0]
        raise NumericError(f"non-finite loss at cost entry ({i}, {k})")
    return c


# ---------------------------------------------------------------------------
# Benchmark


@dataclass(frozen=True)
class BenchRow:
    method: str
    n: int
    mean_ms: float
    std_ms: float


def warm_up() -> None:
    """Trigger JIT compilation so timings exclude it."""
    c = np.array([[0.0, 1.0], [1.0, 0.0]])
    solve_hungarian(c)
    solve_greedy(c)


def bench_assign(n: int, method: str = "both", repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    if n < 2:
        raise ValueError("n must be >= 2")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    methods = ["hungarian", "greedy"] if method == "both" else [method]
    for m in methods:
        if m not in ("hungarian", "greedy"):
            raise ValueError(f"unknown benchmark method {m!r}")
    warm_up()
    rng = np.random.default_rng(seed)
    matrices = [rng.random((n, n)) for _ in range(repeats)]
    rows = []
    for m in methods:
        solver = SOLVERS[m]
        times = []
        for c in matrices:
            start = time.perf_counter()
            solver(c)
            times.append((time.perf_counter() - start) * 1e3)
        mean = sum(times) / len(times)
        std = math.sqrt(sum((t - mean) ** 2 for t in times) / len(times))
        rows.append(BenchRow(m, n, mean, std))
    return rows
