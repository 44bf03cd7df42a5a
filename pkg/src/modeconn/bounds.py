"""Upper bounds on loss along linear interpolations between two networks.

A layerwise recursion propagates the distance between the interpolated
model's pre-activations and each endpoint's, driven by empirical
endpoint distances, per-layer spectral norms, and the activation's
Lipschitz constant; the terminal step converts the output distance into
a loss bound. Aligning the second endpoint with the squared-L2
pre-activation assignment can only shrink every driving distance, so the
aligned bound is never above the unaligned one.

All distances aggregate over samples as root-mean-square of per-sample
L2 norms, which keeps every inequality in the chain valid.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .alignment import BlockPermutation
from .curves import combine_networks
from .nets import (
    ACTIVATION_LIPSCHITZ,
    Network,
    forward,
    loss,
    spectral_norm,
)

BOUND_LOSS_KINDS = ("rmse", "cross_entropy")
# Global Lipschitz constants of the loss w.r.t. the logits: RMSE is
# 1-Lipschitz in the RMS residual by definition; the softmax-CE gradient
# norm is at most sqrt(2).
LOSS_LIPSCHITZ = {"rmse": 1.0, "cross_entropy": np.sqrt(2.0)}


class UnsupportedArchitectureError(ValueError):
    pass


def rms_distance(A, B):
    """Root-mean over samples of squared per-sample L2 distances."""
    D = np.asarray(A) - np.asarray(B)
    return float(np.sqrt(np.mean(np.sum(D * D, axis=1))))


def one_hot(labels, n_classes):
    Y = np.zeros((len(labels), n_classes))
    Y[np.arange(len(labels)), labels] = 1.0
    return Y


@dataclass
class BoundReport:
    t_grid: np.ndarray
    base_dist_u: np.ndarray        # per hidden layer
    base_dist_a: np.ndarray
    d_u: np.ndarray                # (L-1, T, 2): to endpoint 0 / endpoint 1
    d_a: np.ndarray
    B_u_t: np.ndarray
    B_a_t: np.ndarray
    B_u: float
    B_a: float
    B_u_epsmax: float              # variant with the single shared epsilon
    B_a_epsmax: float
    realized_loss_u: np.ndarray
    realized_loss_a: np.ndarray
    constants: dict

    def rows(self):
        for i, t in enumerate(self.t_grid):
            yield (t, self.B_u_t[i], self.B_a_t[i],
                   self.realized_loss_u[i], self.realized_loss_a[i])


def distance_recursion(base, s1, s2, L_sigma, t_grid):
    """Per-layer distance bounds d[i, :, 0/1] given base endpoint
    distances and spectral norms of layers 1..L-1 (d[0] would be zero:
    the input is shared)."""
    base = np.asarray(base, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    H = base.size
    d = np.zeros((H, t.size, 2))
    prev0 = np.zeros_like(t)
    prev1 = np.zeros_like(t)
    for i in range(H):
        carry = L_sigma * ((1 - t) * s1[i] * prev0 + t * s2[i] * prev1)
        d[i, :, 0] = carry + t * base[i]
        d[i, :, 1] = carry + (1 - t) * base[i]
        prev0, prev1 = d[i, :, 0], d[i, :, 1]
    return d


def terminal_bound(d_last0, d_last1, s1_L, s2_L, eps1, eps2, L_sigma, L_L, t_grid):
    """Pointwise loss bound from the last hidden distances and the
    endpoint optimality residuals (sharpened (1-t) eps1 + t eps2 form)."""
    t = np.asarray(t_grid, dtype=float)
    dist = (1 - t) * s1_L * L_sigma * d_last0 + t * s2_L * L_sigma * d_last1
    return L_L * (dist + (1 - t) * eps1 + t * eps2)


def _interp_realized(net1, net2p, X, Y, t_grid, kind):
    """Loss of the straight interpolation at each grid t. For rmse this is
    the RMS residual; for cross_entropy it is the CE excess over the CE of
    the one-hot target logits (the quantity the Lipschitz bound covers)."""
    out = []
    baseline = 0.0
    if kind == "cross_entropy":
        labels = np.argmax(Y, axis=1)
        baseline = _ce_of(Y, labels)
    for t in t_grid:
        net = combine_networks([(1.0 - t, net1), (t, net2p)])
        logits, _ = forward(net, X)
        if kind == "rmse":
            out.append(rms_distance(logits, Y))
        else:
            out.append(_ce_of(logits, np.argmax(Y, axis=1)) - baseline)
    return np.array(out)


def _ce_of(logits, labels):
    return loss(logits, labels, "cross_entropy")


def compute_bounds(theta1: Network, theta2: Network, P: Optional[BlockPermutation],
                   dataset=None, t_grid=None, loss_kind: str = "rmse",
                   split: str = "alignment", inputs=None, targets=None,
                   alignment_variant: str = "l2_pre") -> BoundReport:
    """Bound the loss along the unaligned and P-aligned linear
    interpolations between two feed-forward networks.

    The data defaults to the alignment split (the same samples the
    assignment minimized over, which is what makes aligned base distances
    provably no larger). Raw (inputs, targets) can be passed instead of a
    dataset. When P comes from anything other than squared-L2
    pre-activation matching the aligned bound is still valid but only
    heuristically smaller; the report flags that.
    """
    spec = theta1.spec
    if theta2.spec != spec:
        raise ValueError("endpoints must share one spec")
    if spec.residual_period is not None:
        raise UnsupportedArchitectureError("bounds support plain feed-forward specs only")
    if loss_kind not in BOUND_LOSS_KINDS:
        raise ValueError(f"bound loss kind must be one of {BOUND_LOSS_KINDS}")
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 21)
    t_grid = np.asarray(t_grid, dtype=float)
    if inputs is None:
        if dataset is None:
            raise ValueError("need a dataset or raw inputs")
        X, y = (dataset.alignment_arrays() if split == "alignment"
                else dataset.train_arrays() if split == "train"
                else dataset.validation_arrays())
        if X.shape[0] == 0:
            raise ValueError(f"{split} split is empty")
        Y = one_hot(y, dataset.n_classes)
    else:
        X = np.asarray(inputs, dtype=float)
        Y = np.asarray(targets, dtype=float)

    L = spec.n_layers
    H = L - 1
    if P is None:
        P = BlockPermutation.identity(spec)

    _, f1 = forward(theta1, X, capture="pre_activations")
    _, f2 = forward(theta2, X, capture="pre_activations")
    logits1, _ = forward(theta1, X)
    logits2, _ = forward(theta2, X)

    base_u = np.array([rms_distance(f1[i], f2[i]) for i in range(H)])
    base_a = np.array(
        [rms_distance(f1[i], f2[i][:, P.perms[i]]) for i in range(H)]
    )
    s1 = [spectral_norm(W) for W in theta1.weights]
    s2 = [spectral_norm(W) for W in theta2.weights]
    L_sigma = ACTIVATION_LIPSCHITZ[spec.activation]
    L_L = LOSS_LIPSCHITZ[loss_kind]
    eps1 = rms_distance(logits1, Y)
    eps2 = rms_distance(logits2, Y)

    d_u = distance_recursion(base_u, s1, s2, L_sigma, t_grid)
    d_a = distance_recursion(base_a, s1, s2, L_sigma, t_grid)
    if H > 0:
        B_u_t = terminal_bound(d_u[-1, :, 0], d_u[-1, :, 1], s1[-1], s2[-1],
                               eps1, eps2, L_sigma, L_L, t_grid)
        B_a_t = terminal_bound(d_a[-1, :, 0], d_a[-1, :, 1], s1[-1], s2[-1],
                               eps1, eps2, L_sigma, L_L, t_grid)
    else:
        zeros = np.zeros_like(t_grid)
        B_u_t = terminal_bound(zeros, zeros, s1[-1], s2[-1], eps1, eps2,
                               L_sigma, L_L, t_grid)
        B_a_t = B_u_t.copy()

    eps_max = max(eps1, eps2)
    shift = L_L * (eps_max - ((1 - t_grid) * eps1 + t_grid * eps2))
    B_u_eps = B_u_t + shift
    B_a_eps = B_a_t + shift

    theta2a = _apply_perm(theta2, P)
    realized_u = _interp_realized(theta1, theta2, X, Y, t_grid, loss_kind)
    realized_a = _interp_realized(theta1, theta2a, X, Y, t_grid, loss_kind)

    return BoundReport(
        t_grid=t_grid,
        base_dist_u=base_u,
        base_dist_a=base_a,
        d_u=d_u,
        d_a=d_a,
        B_u_t=B_u_t,
        B_a_t=B_a_t,
        B_u=float(np.trapezoid(B_u_t, t_grid)),
        B_a=float(np.trapezoid(B_a_t, t_grid)),
        B_u_epsmax=float(np.trapezoid(B_u_eps, t_grid)),
        B_a_epsmax=float(np.trapezoid(B_a_eps, t_grid)),
        realized_loss_u=realized_u,
        realized_loss_a=realized_a,
        constants={
            "L_sigma": L_sigma,
            "L_L": L_L,
            "eps1": eps1,
            "eps2": eps2,
            "spectral_norms_1": [float(s) for s in s1],
            "spectral_norms_2": [float(s) for s in s2],
            "loss_kind": loss_kind,
            "alignment_variant": alignment_variant,
            "alignment_is_theorem_setting": alignment_variant == "l2_pre",
        },
    )


def _apply_perm(net, P):
    from .alignment import apply_block_permutation

    return apply_block_permutation(net, P)


# ---------------------------------------------------------------------------
# tightness construction


@dataclass
class TightInstance:
    """Pair of sign-controlled scaled-identity networks, a constant input
    batch, and dense regression targets, built so every inequality in the
    bound chain is an equality."""

    net1: Network
    net2: Network
    inputs: np.ndarray
    targets: np.ndarray


def build_tight_instance(n_hidden: int = 1, width: int = 3, weight_scale: float = 1.0,
                         n_samples: int = 4, target_slack: float = 0.5) -> TightInstance:
    """Construct the tight-bound instance.

    All layer maps are (+/-) scaled identities (exact isometries up to
    scale, with the sign pattern W1 >= 0, W2 <= 0), inputs sit on the
    all-ones direction, and each layer's bias gap is chosen large enough
    that pre-activations stay positive and grow monotonically in t, so
    the activation is the identity on the active region and every
    triangle-inequality term points along +1. Targets sit below the
    endpoint outputs on the same +1 direction.
    """
    from .nets import NetworkSpec

    if width < 1 or n_hidden < 1:
        raise ValueError("need at least one hidden layer of positive width")
    c = float(weight_scale)
    L = n_hidden + 1
    spec = NetworkSpec(layer_widths=tuple([width] * (L + 1)), activation="relu", has_bias=True)
    xi = 0.5

    # Everything stays on the all-ones direction: per layer i, the
    # interpolated pre-activation is F_i(t) * 1 with
    #   F_i(t) = (1 - 2t) c F_{i-1}(t) + (1-t) beta1_i + t beta2_i.
    # Choosing the bias gap beta2_i - beta1_i above 2c max F_{i-1} +
    # c max |F_{i-1}'| keeps F_i positive and strictly increasing in t,
    # which makes every inequality in the bound chain an equality.
    f_at0, f_at1, slope_max = xi, xi, 0.0
    b1, b2 = [], []
    for _ in range(L):
        beta1 = c * f_at1 + 1.0
        gap = 2.0 * c * f_at1 + c * slope_max + 1.0
        b1.append(beta1)
        b2.append(beta1 + gap)
        f_at0, f_at1, slope_max = (
            c * f_at0 + beta1,
            -c * f_at1 + beta1 + gap,
            2.0 * c * f_at1 + c * slope_max + gap,
        )

    net1 = Network(spec, [np.eye(width) * c for _ in range(L)], [np.full(width, v) for v in b1])
    net2 = Network(spec, [np.eye(width) * -c for _ in range(L)], [np.full(width, v) for v in b2])
    X = np.full((n_samples, width), xi)
    logits1, _ = forward(net1, X)
    targets = logits1 - target_slack
    inst = TightInstance(net1, net2, X, targets)
    _assert_tight_conditions(inst)
    return inst


def _assert_tight_conditions(inst: TightInstance, n_check: int = 41):
    """Internal consistency check: positivity and monotone growth of every
    pre-activation along the interpolation."""
    ts = np.linspace(0.0, 1.0, n_check)
    prev = None
    for t in ts:
        net = combine_networks([(1.0 - t, inst.net1), (t, inst.net2)])
        _, pres = forward(net, inst.inputs, capture="pre_activations")
        logits, _ = forward(net, inst.inputs)
        vals = np.array([p[0, 0] for p in pres] + [logits[0, 0]])
        if np.any(np.array([p.min() for p in pres]) <= 0):
            raise RuntimeError("tight instance lost pre-activation positivity")
        if prev is not None and np.any(vals < prev - 1e-12):
            raise RuntimeError("tight instance lost monotone growth")
        prev = vals


def tightness_probe(inst: TightInstance, t_grid=None, spectral_tol: float = 1e-12):
    """Measure the slack of each inequality class in the bound chain on a
    concrete instance (unaligned interpolation, RMSE loss).

    Returns {"loss_lipschitz", "activation_lipschitz", "matrix_norm",
    "recursion_triangle", "endpoint_triangle", "total"}: each the maximum
    gap (bound side minus realized side) over the grid and layers.
    """
    net1, net2, X, Y = inst.net1, inst.net2, inst.inputs, inst.targets
    spec = net1.spec
    L = spec.n_layers
    H = L - 1
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 21)
    _, f1 = forward(net1, X, capture="pre_activations")
    _, f2 = forward(net2, X, capture="pre_activations")
    base = [rms_distance(f1[i], f2[i]) for i in range(H)]
    s1 = [spectral_norm(W, tol=spectral_tol) for W in net1.weights]
    s2 = [spectral_norm(W, tol=spectral_tol) for W in net2.weights]
    eps1 = rms_distance(forward(net1, X)[0], Y)
    eps2 = rms_distance(forward(net2, X)[0], Y)

    gaps = {
        "loss_lipschitz": 0.0,
        "activation_lipschitz": 0.0,
        "matrix_norm": 0.0,
        "recursion_triangle": 0.0,
        "endpoint_triangle": 0.0,
    }
    from .nets import activate

    g1 = [activate(spec, f) for f in f1]
    g2 = [activate(spec, f) for f in f2]
    l0 = forward(net1, X)[0]
    l1 = forward(net2, X)[0]
    for t in t_grid:
        net = combine_networks([(1.0 - t, net1), (t, net2)])
        _, ft = forward(net, X, capture="pre_activations")
        logits, _ = forward(net, X)
        gt = [activate(spec, f) for f in ft]
        for i in range(H):
            # activation Lipschitz: ||sigma f(t) - sigma f(j)|| vs ||f(t) - f(j)||
            for fj, gj in ((f1[i], g1[i]), (f2[i], g2[i])):
                gaps["activation_lipschitz"] = max(
                    gaps["activation_lipschitz"],
                    rms_distance(ft[i], fj) - rms_distance(gt[i], gj),
                )
        for i in range(1, H + 1):
            W1_i, W2_i = net1.weights[i], net2.weights[i]
            dg0 = gt[i - 1] - g1[i - 1]
            dg1 = gt[i - 1] - g2[i - 1]
            gaps["matrix_norm"] = max(
                gaps["matrix_norm"],
                s1[i] * rms_distance(gt[i - 1], g1[i - 1]) - rms_of(dg0 @ W1_i.T),
                s2[i] * rms_distance(gt[i - 1], g2[i - 1]) - rms_of(dg1 @ W2_i.T),
            )
        for i in range(1, H):
            # triangle for the hidden recursion at layer i+1 (1-indexed)
            W1_i, W2_i = net1.weights[i], net2.weights[i]
            lhs = rms_distance(ft[i], f1[i])
            rhs = (
                (1 - t) * rms_of((gt[i - 1] - g1[i - 1]) @ W1_i.T)
                + t * rms_of((gt[i - 1] - g2[i - 1]) @ W2_i.T)
                + t * rms_distance(f1[i], f2[i])
            )
            gaps["recursion_triangle"] = max(gaps["recursion_triangle"], rhs - lhs)
        # terminal triangle with endpoint residuals
        W1_L, W2_L = net1.weights[-1], net2.weights[-1]
        lhs = rms_distance(logits, Y)
        rhs = (
            (1 - t) * rms_of((gt[H - 1] - g1[H - 1]) @ W1_L.T)
            + t * rms_of((gt[H - 1] - g2[H - 1]) @ W2_L.T)
            + (1 - t) * eps1
            + t * eps2
        )
        gaps["endpoint_triangle"] = max(gaps["endpoint_triangle"], rhs - lhs)
        # loss Lipschitz: L_L * ||l(t) - Y||_rms vs the realized loss; RMSE
        # with L_L = 1 makes this zero by construction, which is the point
        realized = rms_distance(logits, Y)
        gaps["loss_lipschitz"] = max(
            gaps["loss_lipschitz"], LOSS_LIPSCHITZ["rmse"] * rms_distance(logits, Y) - realized
        )
    gaps["total"] = max(gaps.values())
    return gaps


def rms_of(D):
    return float(np.sqrt(np.mean(np.sum(D * D, axis=1))))
