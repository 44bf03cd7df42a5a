"""Exact solver for the linear assignment problem.

Shortest-augmenting-path Hungarian method with dual potentials, O(n^3).
Rows are inserted in index order and column scans break ties toward the
lowest index, so the result is deterministic; on fully tied instances
(e.g. a constant cost matrix) this yields the lexicographically smallest
optimal permutation.
"""

import numpy as np


def solve_assignment(cost):
    """Minimize sum_i cost[i, perm[i]] over permutations.

    Returns (perm, total_cost) with perm[i] the column assigned to row i.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise ValueError(f"cost matrix must be square and nonempty, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix contains non-finite entries")
    n = C.shape[0]

    # p[j] = row (1-based) assigned to column j (1-based); column 0 is a
    # virtual root for the alternating path. u, v are dual potentials.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        way = np.zeros(n + 1, dtype=int)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1, :] - u[i0] - v[1:]
            minv1 = minv[1:]
            upd = free & (cur < minv1)
            minv1[upd] = cur[upd]
            way[1:][upd] = j0
            free_idx = np.nonzero(free)[0]
            k = free_idx[np.argmin(minv1[free_idx])]
            delta = minv1[k]
            j1 = k + 1
            u[p[used]] += delta
            v[used] -= delta
            minv1[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    total = float(C[np.arange(n), perm].sum())
    return perm, total


def permutation_matrix(perm):
    """Matrix P with P[i, perm[i]] = 1, so (P @ W)[i] = W[perm[i]]."""
    perm = np.asarray(perm, dtype=int)
    n = perm.size
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1.0
    return P


def invert_permutation(perm):
    perm = np.asarray(perm, dtype=int)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv
