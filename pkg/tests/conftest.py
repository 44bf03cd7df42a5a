import numpy as np
import pytest

from modeconn.data import Dataset
from modeconn.nets import (
    Network,
    NetworkSpec,
    forward,
    grad_to_vector,
    init_network,
    loss,
    params_to_vector,
    vector_to_params,
)

ACTIVATION_CHOICES = ("relu", "huberized_relu", "tanh", "identity")


def random_spec(rng, max_hidden=3, max_width=6, activation=None, in_dim=None, out_dim=None):
    n_hidden = int(rng.integers(1, max_hidden + 1))
    widths = [in_dim or int(rng.integers(2, max_width + 1))]
    widths += [int(rng.integers(2, max_width + 1)) for _ in range(n_hidden)]
    widths.append(out_dim or int(rng.integers(2, max_width + 1)))
    act = activation or ACTIVATION_CHOICES[int(rng.integers(0, len(ACTIVATION_CHOICES)))]
    delta = float(rng.uniform(0.3, 1.5)) if act == "huberized_relu" else None
    return NetworkSpec(tuple(widths), activation=act, huber_delta=delta)


def random_net(rng, **kwargs):
    """Random net with jittered biases. Zero biases would leave exact-zero
    pre-activations downstream of fully dead relu layers, parking the net
    on the kink where finite differences are meaningless."""
    spec = random_spec(rng, **kwargs)
    net = init_network(spec, rng)
    if net.biases is not None:
        for b in net.biases:
            b += rng.uniform(-0.5, 0.5, size=b.shape)
    return net


def gaussian_dataset(n, dim, k, seed, align_only=False):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    y = rng.integers(0, k, n)
    if align_only:
        tags = np.full(n, "alignment", dtype="<U10")
    else:
        tags = np.full(n, "train", dtype="<U10")
        tags[: n // 4] = "validation"
        tags[n // 4 : n // 2] = "alignment"
    return Dataset(X, y, tags, k)


def fd_gradient(spec, vec, X, y, kind, eps=1e-5):
    """Central-difference gradient of the mean loss over all parameters."""
    g = np.zeros_like(vec)
    for i in range(vec.size):
        vp = vec.copy()
        vp[i] += eps
        vm = vec.copy()
        vm[i] -= eps
        lp = loss(forward(vector_to_params(spec, vp), X)[0], y, kind)
        lm = loss(forward(vector_to_params(spec, vm), X)[0], y, kind)
        g[i] = (lp - lm) / (2 * eps)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def jacobi_svd_norm(A, sweeps=60, tol=1e-14):
    """Largest singular value by one-sided Jacobi rotations (independent
    oracle for the power-iteration implementation)."""
    A = np.array(A, dtype=float)
    if A.shape[0] < A.shape[1]:
        A = A.T
    U = A.copy()
    m, n = U.shape
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = U[:, p] @ U[:, p]
                beta = U[:, q] @ U[:, q]
                gamma = U[:, p] @ U[:, q]
                off = max(off, abs(gamma) / max(np.sqrt(alpha * beta), 1e-300))
                if abs(gamma) < tol * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up = U[:, p].copy()
                U[:, p] = c * up - s * U[:, q]
                U[:, q] = s * up + c * U[:, q]
        if off < tol:
            break
    return float(np.sqrt(max(np.sum(U * U, axis=0))))


def brute_force_assignment(C):
    """Exhaustive minimum with lexicographic tie-break (strict improvement
    keeps the first-found, i.e. lexicographically smallest, optimum)."""
    import itertools

    n = C.shape[0]
    best_perm, best_cost = None, np.inf
    for p in itertools.permutations(range(n)):
        c = sum(C[i, p[i]] for i in range(n))
        if c < best_cost - 1e-15:
            best_cost, best_perm = c, p
    return np.array(best_perm), best_cost


@pytest.fixture(scope="session")
def base_rng():
    return np.random.default_rng(20260810)
