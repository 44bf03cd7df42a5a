"""Neuron alignment between two networks of identical architecture.

Builds per-layer matching costs from activations on a held-out alignment
split, solves the assignment problem per layer (Hungarian), and applies
the resulting block permutation to the second network without changing
the function it computes. Skip-connected layers share one permutation,
found from the mean of their cost matrices.
"""

from dataclasses import dataclass

import numpy as np

from .assignment import solve_assignment
from .nets import DimensionError, Network, forward

COST_VARIANTS = ("corr_post", "corr_pre", "l2_post", "l2_pre")


@dataclass
class BlockPermutation:
    """One permutation array per hidden layer l = 1..L-1.

    perms[l-1][i] is the index of the net-2 neuron matched to net-1 neuron
    i at layer l. Input and output layers keep their fixed ordering.
    """

    perms: list

    def __post_init__(self):
        self.perms = [np.asarray(p, dtype=int) for p in self.perms]
        for l, p in enumerate(self.perms, start=1):
            if sorted(p.tolist()) != list(range(p.size)):
                raise ValueError(f"layer {l}: not a permutation of [0, {p.size})")

    def is_identity(self):
        return all(np.array_equal(p, np.arange(p.size)) for p in self.perms)

    def compose(self, other):
        """Permutation equivalent to applying ``other`` first, then self."""
        return BlockPermutation([q[p] for p, q in zip(self.perms, other.perms)])

    @staticmethod
    def identity(spec):
        return BlockPermutation([np.arange(w) for w in spec.hidden_widths])

    @staticmethod
    def random(spec, rng):
        """Random block permutation respecting skip-connection sharing."""
        widths = spec.layer_widths
        perms = [None] * (spec.n_layers - 1)
        for group in spec.permutation_groups():
            p = rng.permutation(widths[group[0]])
            for l in group:
                perms[l - 1] = p.copy()
        return BlockPermutation(perms)


@dataclass
class CostMatrix:
    layer: int
    values: np.ndarray
    variant: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.variant not in COST_VARIANTS:
            raise ValueError(f"unknown cost variant {self.variant!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"layer {self.layer}: non-finite cost entries")


def apply_block_permutation(net: Network, bp: BlockPermutation) -> Network:
    """Return the network with permuted hidden neurons; the computed
    function is unchanged. Row-permutes W_l and b_l by P_l and
    column-permutes W_{l+1} by P_l^T."""
    if len(bp.perms) != net.spec.n_layers - 1:
        raise DimensionError(
            f"expected {net.spec.n_layers - 1} layer permutations, got {len(bp.perms)}"
        )
    out = net.copy()
    for l, p in enumerate(bp.perms, start=1):
        if p.size != net.spec.layer_widths[l]:
            raise DimensionError(f"layer {l}: permutation size {p.size}")
        out.weights[l - 1] = out.weights[l - 1][p, :]
        if out.biases is not None:
            out.biases[l - 1] = out.biases[l - 1][p]
        out.weights[l] = out.weights[l][:, p]
    return out


def normalize_rows(A, zero_tol=1e-12):
    """Mean-center each row and scale to unit norm; rows with (numerically)
    zero variance become zero vectors, so dead channels cost 1 against
    everything instead of producing NaNs."""
    A = np.asarray(A, dtype=float)
    centered = A - A.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1, keepdims=True)
    out = np.zeros_like(centered)
    live = norms[:, 0] > zero_tol
    out[live] = centered[live] / norms[live]
    return out


def collect_activations(net: Network, dataset, which: str = "post"):
    """Per-layer activation matrices Z_l (m_l x n_align) on the alignment
    split. For correlation costs rows are centered to unit norm; for l2
    costs rows are raw."""
    X, _ = dataset.alignment_arrays()
    return collect_activations_from_inputs(net, X, which)


def collect_activations_from_inputs(net: Network, X, which: str):
    if X.shape[0] == 0:
        raise ValueError("alignment split is empty")
    if which.startswith("corr_") or which.startswith("l2_"):
        mode = which.split("_", 1)[1]
    else:
        mode = which
    if mode not in ("pre", "post"):
        raise ValueError(f"unknown activation kind {which!r}")
    _, captured = forward(net, X, capture=f"{mode}_activations")
    mats = [Z.T.copy() for Z in captured]  # rows = channels
    if which.startswith("corr_"):
        mats = [normalize_rows(Z) for Z in mats]
    return mats


def build_cost(Z1, Z2, variant: str, layer: int = 0) -> CostMatrix:
    """Matching cost between the channels of two activation matrices.

    corr_*: 1 - Z1 Z2^T with Z rows pre-normalized, entries in [0, 2].
    l2_*: squared L2 distance between raw channel rows, summed over
    samples (the empirical squared Wasserstein-2 ground cost).
    """
    Z1 = np.asarray(Z1, dtype=float)
    Z2 = np.asarray(Z2, dtype=float)
    if Z1.shape != Z2.shape:
        raise DimensionError(f"activation shapes differ: {Z1.shape} vs {Z2.shape}")
    if variant.startswith("corr_"):
        values = 1.0 - Z1 @ Z2.T
    elif variant.startswith("l2_"):
        sq1 = np.sum(Z1 * Z1, axis=1)[:, None]
        sq2 = np.sum(Z2 * Z2, axis=1)[None, :]
        values = np.maximum(sq1 + sq2 - 2.0 * Z1 @ Z2.T, 0.0)
    else:
        raise ValueError(f"unknown cost variant {variant!r}")
    return CostMatrix(layer=layer, values=values, variant=variant)


def align_networks(net1: Network, net2: Network, dataset, variant: str = "corr_post",
                   residual_mode: bool = None):
    """Match net2's hidden neurons to net1's, layer by layer (Alg.-style
    sequential semantics: net2 activations are recomputed after each
    applied permutation).

    When the spec has skip connections (residual_mode defaults to that),
    all layers of a skip-tied group get one shared permutation solved on
    the mean of their cost matrices.

    Returns (BlockPermutation, permuted copy of net2, per-layer costs).
    """
    if net1.spec != net2.spec:
        raise DimensionError("networks must share one spec")
    if variant not in COST_VARIANTS:
        raise ValueError(f"unknown cost variant {variant!r}")
    if residual_mode is None:
        residual_mode = net1.spec.residual_period is not None
    X, _ = dataset.alignment_arrays()
    if X.shape[0] == 0:
        raise ValueError("alignment split is empty")

    spec = net1.spec
    widths = spec.layer_widths
    which = variant  # corr_post etc. selects both normalization and capture
    Z1 = collect_activations_from_inputs(net1, X, which)
    net2_work = net2.copy()
    perms = [None] * (spec.n_layers - 1)
    costs = [None] * (spec.n_layers - 1)

    if residual_mode:
        groups = spec.permutation_groups()
    else:
        groups = [[l] for l in range(1, spec.n_layers)]
    groups = sorted(groups, key=lambda g: g[0])

    for group in groups:
        Z2 = collect_activations_from_inputs(net2_work, X, which)
        group_cost = np.mean(
            [build_cost(Z1[l - 1], Z2[l - 1], variant, layer=l).values for l in group],
            axis=0,
        )
        perm, total = solve_assignment(group_cost)
        for l in group:
            perms[l - 1] = perm.copy()
            costs[l - 1] = float(
                build_cost(Z1[l - 1], Z2[l - 1], variant, layer=l).values[
                    np.arange(widths[l]), perm
                ].sum()
            )
            # update weights in place so later layers see permuted channels
            net2_work.weights[l - 1] = net2_work.weights[l - 1][perm, :]
            if net2_work.biases is not None:
                net2_work.biases[l - 1] = net2_work.biases[l - 1][perm]
            net2_work.weights[l] = net2_work.weights[l][:, perm]

    return BlockPermutation(perms), net2_work, costs


def matched_correlations(net1: Network, net2: Network, dataset, bp: BlockPermutation = None):
    """Per-layer mean correlation between matched channel pairs
    (identity matching when ``bp`` is None)."""
    if net1.spec != net2.spec:
        raise DimensionError("networks must share one spec")
    X, _ = dataset.alignment_arrays()
    Z1 = collect_activations_from_inputs(net1, X, "corr_post")
    Z2 = collect_activations_from_inputs(net2, X, "corr_post")
    out = []
    for l, (a, b) in enumerate(zip(Z1, Z2), start=1):
        p = np.arange(a.shape[0]) if bp is None else bp.perms[l - 1]
        out.append(float(np.mean(np.sum(a * b[p], axis=1))))
    return np.array(out)


def correlation_signature(net1: Network, net2: Network, dataset):
    """Mean correlation of same-index channels at each hidden layer."""
    return matched_correlations(net1, net2, dataset, bp=None)


def permutation_stability_check(net1, net2, dataset, variant="corr_post", seed=0):
    """Recompute the alignment on two half-splits of the alignment data and
    report the fraction of matched indices that agree (1.0 = stable)."""
    from .rng import substream

    X, y = dataset.alignment_arrays()
    rng = substream(seed, "align-stability")
    order = rng.permutation(X.shape[0])
    halves = []
    for idx in (order[: len(order) // 2], order[len(order) // 2 :]):
        sub = _subset_for_alignment(dataset, idx)
        bp, _, _ = align_networks(net1, net2, sub, variant=variant)
        halves.append(bp)
    agree = [
        float(np.mean(p == q)) for p, q in zip(halves[0].perms, halves[1].perms)
    ]
    return np.array(agree)


def _subset_for_alignment(dataset, align_local_idx):
    from .data import Dataset

    X, y = dataset.alignment_arrays()
    Xs, ys = X[align_local_idx], y[align_local_idx]
    tags = np.full(len(ys), "alignment", dtype="<U10")
    return Dataset(Xs, ys, tags, dataset.n_classes)
