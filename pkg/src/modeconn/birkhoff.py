"""Doubly stochastic relaxation tools for permutation optimization.

Alternating projection onto the Birkhoff polytope, a greedy
Birkhoff-von-Neumann decomposition whose first term is the Hungarian
projection, and seeded sampling of permutations from the decomposition.
"""

from dataclasses import dataclass

import numpy as np

from .assignment import permutation_matrix, solve_assignment

DEFAULT_DS_TOL = 1e-4


class BvnError(RuntimeError):
    """Numerical breakdown while decomposing a doubly stochastic matrix."""


@dataclass
class DoublyStochasticBlock:
    """One relaxed permutation matrix per hidden layer."""

    mats: list

    def __post_init__(self):
        self.mats = [np.asarray(D, dtype=float) for D in self.mats]
        for i, D in enumerate(self.mats):
            if D.ndim != 2 or D.shape[0] != D.shape[1]:
                raise ValueError(f"block {i}: matrix must be square, got {D.shape}")

    def residual(self):
        """Max deviation of any row/column sum from 1, over all blocks."""
        worst = 0.0
        for D in self.mats:
            worst = max(
                worst,
                float(np.abs(D.sum(axis=0) - 1.0).max()),
                float(np.abs(D.sum(axis=1) - 1.0).max()),
            )
        return worst

    def min_entry(self):
        return min(float(D.min()) for D in self.mats)

    def check(self, tol=DEFAULT_DS_TOL):
        if self.residual() > tol:
            raise ValueError(f"row/col sums deviate by {self.residual():.2e} > {tol}")
        if self.min_entry() < -tol:
            raise ValueError(f"negative entry {self.min_entry():.2e}")


def _project_sums(A):
    """Orthogonal projection onto {X : X 1 = 1, X^T 1 = 1} (additive
    row/column correction)."""
    n = A.shape[0]
    r = A.sum(axis=1)
    c = A.sum(axis=0)
    total = r.sum()
    kappa = -(1.0 + total / n) / (2.0 * n)
    u = r / n + kappa
    v = c / n + kappa
    return A - u[:, None] - v[None, :]


def project_birkhoff_matrix(A, iters: int = 20):
    """Alternate clamping negatives to zero with the additive sum
    correction; returns the last iterate (sum correction last)."""
    D = np.asarray(A, dtype=float).copy()
    for _ in range(iters):
        D = np.maximum(D, 0.0)
        D = _project_sums(D)
    return D


def project_birkhoff(mats, iters: int = 20) -> DoublyStochasticBlock:
    return DoublyStochasticBlock([project_birkhoff_matrix(D, iters) for D in mats])


@dataclass
class BvnDecomposition:
    """Convex combination D = sum alpha_i P_i, possibly truncated.

    ``terms`` holds the raw (alpha, perm) pairs in extraction order;
    ``weights()`` renormalizes the kept alphas to sum 1, defining the
    sampling distribution.
    """

    terms: list
    truncated_at: int

    def weights(self):
        a = np.array([t[0] for t in self.terms], dtype=float)
        return a / a.sum()

    def alpha_total(self):
        return float(sum(t[0] for t in self.terms))

    def reconstruct(self):
        n = self.terms[0][1].size
        D = np.zeros((n, n))
        for a, p in self.terms:
            D += a * permutation_matrix(p)
        return D


def _support_max_trace_perm(D, zero_tol):
    """Permutation maximizing trace(P^T D) among perfect matchings on the
    support of D (entries > zero_tol).

    The unrestricted maximizer is tried first; whenever it already lies in
    the support (the typical case) it is used as-is, so the first
    decomposition term coincides with the Hungarian projection exactly."""
    n = D.shape[0]
    perm, _ = solve_assignment(-D)
    matched = D[np.arange(n), perm]
    if np.all(matched > zero_tol):
        return perm, matched
    big = n * float(D.max()) + 1.0
    cost = np.where(D > zero_tol, float(D.max()) - D, big)
    perm, _ = solve_assignment(cost)
    matched = D[np.arange(n), perm]
    if np.any(matched <= zero_tol):
        return None, matched
    return perm, matched


def _bottleneck_perm(D, zero_tol):
    """Classical greedy rule: maximize the minimum matched entry.

    Binary search over entry values for the largest threshold that still
    admits a perfect matching (Kuhn's algorithm on the thresholded graph).
    """
    n = D.shape[0]

    def has_matching(thr):
        adj = D >= thr
        match_col = np.full(n, -1)

        def try_row(r, seen):
            for c in range(n):
                if adj[r, c] and not seen[c]:
                    seen[c] = True
                    if match_col[c] < 0 or try_row(match_col[c], seen):
                        match_col[c] = r
                        return True
            return False

        for r in range(n):
            if not try_row(r, np.zeros(n, dtype=bool)):
                return None
        perm = np.empty(n, dtype=int)
        for c in range(n):
            perm[match_col[c]] = c
        return perm

    values = np.unique(D[D > zero_tol])
    lo, hi = 0, len(values) - 1
    best = None
    while lo <= hi:
        mid = (lo + hi) // 2
        perm = has_matching(values[mid])
        if perm is not None:
            best = perm
            lo = mid + 1
        else:
            hi = mid - 1
    if best is None:
        return None, None
    return best, D[np.arange(n), best]


def bvn_decompose(D, truncate=None, zero_tol=1e-9, rule: str = "trace",
                  input_tol: float = 1e-2) -> BvnDecomposition:
    """Greedy BvN decomposition of a (near) doubly stochastic matrix.

    rule="trace" takes the support matching maximizing trace(P^T D) at
    each step (its first term is the Hungarian projection of D);
    rule="bottleneck" is the classical max-min-entry heuristic, exposed
    for comparison. alpha is the smallest matched entry; extraction stops
    when the residual mass is exhausted or ``truncate`` terms were kept.

    Entries within -input_tol of zero (projection leftovers) are clipped;
    anything more negative means the input is not near the polytope.
    """
    D = np.asarray(D, dtype=float).copy()
    n = D.shape[0]
    if D.shape != (n, n) or n == 0:
        raise ValueError("D must be square and nonempty")
    if rule not in ("trace", "bottleneck"):
        raise ValueError(f"unknown BvN rule {rule!r}")
    if D.min() < -input_tol:
        raise ValueError(f"entry {D.min():.3e} is too negative for a relaxed permutation")
    D = np.maximum(D, 0.0)
    terms = []
    remaining = float(D.sum()) / n
    truncated_at = 0
    while remaining > zero_tol * n:
        if truncate is not None and len(terms) >= truncate:
            break
        finder = _support_max_trace_perm if rule == "trace" else _bottleneck_perm
        perm, matched = finder(D, zero_tol)
        if perm is None:
            break  # support lost a perfect matching: residual is numerical noise
        alpha = float(matched.min())
        if alpha <= zero_tol:
            break
        terms.append((alpha, perm))
        D[np.arange(n), perm] -= alpha
        if D.min() < -1e-8:
            raise BvnError(f"residual developed negative entry {D.min():.3e}")
        D = np.maximum(D, 0.0)
        remaining -= alpha
        truncated_at = len(terms)
    if not terms:
        raise BvnError("no permutation could be extracted; input is not near doubly stochastic")
    return BvnDecomposition(terms=terms, truncated_at=truncated_at)


def hungarian_projection(D):
    """argmin_P -trace(P^T D): the closest permutation under the linear
    relaxation heuristic."""
    perm, _ = solve_assignment(-np.asarray(D, dtype=float))
    return perm


def sample_permutations(decomps, M: int, seed: int = 0):
    """Draw M independent per-layer permutation tuples from the BvN
    sampling distributions. Returns a list of M lists of permutation
    arrays (one per decomposition in ``decomps``)."""
    if not decomps:
        raise ValueError("need at least one decomposition")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB57]))
    out = []
    weights = [d.weights() for d in decomps]
    for _ in range(M):
        sample = []
        for d, w in zip(decomps, weights):
            idx = int(rng.choice(len(w), p=w))
            sample.append(d.terms[idx][1].copy())
        out.append(sample)
    return out
