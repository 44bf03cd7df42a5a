"""Proximal alternating minimization over (curve parameters, permutation).

The Bezier curve is reparameterized so the control point tracks the
permuted endpoint: r(t) = (1-t)^2 th1 + t^2 P th2 + 2(1-t)t ((th1 + P th2)/2
+ c~), which collapses to r(t) = (1-t) th1 + t P th2 + 2(1-t)t c~. The
permutation subproblem relaxes P to doubly stochastic matrices, runs
projected SGD, then picks the best of {previous P, Hungarian projection,
BvN samples} so the objective can never increase at that step. The curve
subproblem runs (proximal) SGD on c~.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .alignment import BlockPermutation, apply_block_permutation
from .birkhoff import (
    BvnError,
    bvn_decompose,
    hungarian_projection,
    project_birkhoff_matrix,
    sample_permutations,
)
from .curves import BezierCurve, combine_networks
from .nets import (
    Gradients,
    Network,
    accuracy,
    backward,
    forward,
    loss,
)
from .assignment import permutation_matrix


@dataclass
class PamConfig:
    nu_P: float = 1.0
    nu_phi: float = 1.0
    perm_epochs: int = 20
    curve_epochs: int = 250
    proj_iters: int = 20
    bvn_truncate: int = 10
    n_samples: int = 32
    outer_iters: int = 1
    selection_batch: int = 2048
    seed: int = 0
    perm_lr: float = 0.05
    phi_lr: float = 1e-2
    batch_size: int = 128
    scoring_t_points: int = 9
    anneal_factor: float = 0.5
    loss_kind: str = "cross_entropy"
    bvn_rule: str = "trace"

    def __post_init__(self):
        positives = (
            self.nu_P, self.nu_phi, self.perm_epochs, self.curve_epochs, self.proj_iters,
            self.bvn_truncate, self.n_samples, self.selection_batch, self.perm_lr,
            self.phi_lr, self.batch_size, self.scoring_t_points, self.anneal_factor,
        )
        if any(v <= 0 for v in positives) or self.outer_iters < 0:
            raise ValueError("PAM hyperparameters must be positive")


def zero_control(spec) -> Network:
    widths = spec.layer_widths
    weights = [np.zeros((widths[l], widths[l - 1])) for l in range(1, spec.n_layers + 1)]
    biases = [np.zeros(widths[l]) for l in range(1, spec.n_layers + 1)] if spec.has_bias else None
    return Network(spec, weights, biases)


def apply_relaxed(net2: Network, mats) -> Network:
    """Apply a per-hidden-layer doubly stochastic block to net2's weights:
    W_l -> D_l W_l D_{l-1}^T, b_l -> D_l b_l (D_0 = D_L = I)."""
    out = net2.copy()
    L = net2.spec.n_layers
    for l in range(1, L):
        D = mats[l - 1]
        out.weights[l - 1] = D @ out.weights[l - 1]
        if out.biases is not None:
            out.biases[l - 1] = D @ out.biases[l - 1]
        out.weights[l] = out.weights[l] @ D.T
    return out


def reparam_point(theta1: Network, theta2p: Network, tilde_c: Network, t: float) -> Network:
    """Network at t of the reparameterized curve; theta2p is the (relaxed
    or hard) permuted second endpoint."""
    return combine_networks(
        [((1.0 - t), theta1), (t, theta2p), (2.0 * (1.0 - t) * t, tilde_c)]
    )


def reparam_curve(theta1: Network, theta2p: Network, tilde_c: Network) -> BezierCurve:
    """Equivalent plain Bezier curve (control = midpoint + tilde_c)."""
    control = combine_networks([(0.5, theta1), (0.5, theta2p), (1.0, tilde_c)])
    return BezierCurve(theta1, theta2p, control)


def relaxed_gradients(theta1: Network, theta2: Network, tilde_c: Network, mats,
                      X, y, t: float, loss_kind: str = "cross_entropy"):
    """Loss at r(t) under the relaxed block, with gradients w.r.t. every
    relaxation matrix and the control deviation.

    Returns (loss_value, grad_mats, grad_control)."""
    theta2p = apply_relaxed(theta2, mats)
    point = reparam_point(theta1, theta2p, tilde_c, t)
    logits, _ = forward(point, X)
    value = loss(logits, y, loss_kind)
    g = backward(point, X, y, loss_kind)
    L = theta1.spec.n_layers
    W2 = theta2.weights
    b2 = theta2.biases
    grad_mats = []
    for l in range(1, L):
        D_prev = None if l == 1 else mats[l - 2]
        D_next = None if l == L - 1 else mats[l]
        # plain-weight gradient of the permuted endpoint carries factor t
        up_l = t * g.weights[l - 1]
        gm = up_l @ W2[l - 1].T if D_prev is None else up_l @ (D_prev @ W2[l - 1].T)
        up_next = t * g.weights[l]
        if D_next is None:
            gm = gm + up_next.T @ W2[l]
        else:
            gm = gm + up_next.T @ (D_next @ W2[l])
        if b2 is not None:
            gm = gm + np.outer(t * g.biases[l - 1], b2[l - 1])
        grad_mats.append(gm)
    factor = 2.0 * (1.0 - t) * t
    gc = Gradients(
        [factor * gw for gw in g.weights],
        None if g.biases is None else [factor * gb for gb in g.biases],
    )
    return value, grad_mats, gc


def control_gradient(theta1: Network, theta2p: Network, tilde_c: Network,
                     X, y, t: float, loss_kind: str = "cross_entropy"):
    """Loss and gradient w.r.t. the control deviation for a hard-permuted
    endpoint."""
    point = reparam_point(theta1, theta2p, tilde_c, t)
    logits, _ = forward(point, X)
    value = loss(logits, y, loss_kind)
    g = backward(point, X, y, loss_kind)
    factor = 2.0 * (1.0 - t) * t
    return value, Gradients(
        [factor * gw for gw in g.weights],
        None if g.biases is None else [factor * gb for gb in g.biases],
    )


# ---------------------------------------------------------------------------
# objective estimation


@dataclass
class EvalPack:
    """Fixed batch and t grid giving a deterministic objective estimate,
    shared by candidate scoring and the run log."""

    X: np.ndarray
    y: np.ndarray
    t_grid: np.ndarray


def make_eval_pack(dataset, config: PamConfig) -> EvalPack:
    X, y = dataset.train_arrays()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5C0]))
    n = min(config.selection_batch, X.shape[0])
    idx = rng.choice(X.shape[0], size=n, replace=False)
    return EvalPack(X[idx], y[idx], np.linspace(0.0, 1.0, config.scoring_t_points))


def curve_objective(theta1, theta2p, tilde_c, pack: EvalPack, loss_kind):
    """Mean loss over the pack's t grid (trapezoid-weighted uniform grid
    reduces to the plain mean at the interior, which is what we use)."""
    vals = []
    for t in pack.t_grid:
        point = reparam_point(theta1, theta2p, tilde_c, float(t))
        logits, _ = forward(point, pack.X)
        vals.append(loss(logits, pack.y, loss_kind))
    return float(np.mean(vals))


def perm_prox(P: BlockPermutation, P_ref: BlockPermutation, nu_P: float):
    sq = sum(2.0 * float(np.sum(p != q)) for p, q in zip(P.perms, P_ref.perms))
    return sq / (2.0 * nu_P)


def control_prox(tilde_c: Network, anchor: Network, nu_phi: float):
    sq = sum(float(np.sum((a - b) ** 2)) for a, b in zip(tilde_c.weights, anchor.weights))
    if tilde_c.biases is not None:
        sq += sum(float(np.sum((a - b) ** 2)) for a, b in zip(tilde_c.biases, anchor.biases))
    return sq / (2.0 * nu_phi)


# ---------------------------------------------------------------------------
# subproblems


def perm_subproblem(theta1: Network, theta2: Network, tilde_c: Network,
                    P_k: BlockPermutation, dataset, config: PamConfig,
                    lr_scale: float = 1.0, pack: EvalPack = None):
    """One permutation half-step.

    Relaxes P_k on the Birkhoff polytope, runs projected SGD on the
    proximal objective, then selects the best of {P_k, Hungarian
    projection of D*, BvN samples of D*} on the eval pack. Because P_k is
    in the candidate set, the selected score never exceeds P_k's.

    Returns (P_next, selected_label, D_star_mats, score)."""
    spec = theta1.spec
    if pack is None:
        pack = make_eval_pack(dataset, config)
    groups = spec.permutation_groups()
    # one relaxed matrix per skip-tied group, initialized at P_k
    group_mats = []
    for g in groups:
        group_mats.append(permutation_matrix(P_k.perms[g[0] - 1]))
    X, y = dataset.train_arrays()
    n = X.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9E]))
    t_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9F]))
    lr = config.perm_lr * lr_scale
    group_refs = [permutation_matrix(P_k.perms[g[0] - 1]) for g in groups]
    for _ in range(config.perm_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            t0 = float(t_rng.uniform(0.0, 1.0))
            layer_mats = _expand_groups(groups, group_mats, spec)
            _, grad_layers, _ = relaxed_gradients(
                theta1, theta2, tilde_c, layer_mats, X[idx], y[idx], t0, config.loss_kind
            )
            for gi, g in enumerate(groups):
                gq = np.zeros_like(group_mats[gi])
                for l in g:
                    gq += grad_layers[l - 1]
                # forward-backward step: gradient on the curve loss, then
                # the closed-form prox of the quadratic pull toward P_k
                # (stable for any nu_P, unlike a naive gradient on the
                # penalty, and pins D at P_k exactly as nu_P -> 0)
                half = group_mats[gi] - lr * gq
                rho = len(g) * lr / config.nu_P
                group_mats[gi] = project_birkhoff_matrix(
                    (half + rho * group_refs[gi]) / (1.0 + rho), config.proj_iters
                )
    # candidate set S; P_k membership guarantees the selected objective
    # never exceeds the previous one
    candidates = [(P_k, "prev")]
    proj_perms = [hungarian_projection(D) for D in group_mats]
    candidates.append((_block_from_groups(groups, proj_perms, spec), "projection"))
    try:
        decomps = [bvn_decompose(D, truncate=config.bvn_truncate, rule=config.bvn_rule)
                   for D in group_mats]
        samples = sample_permutations(decomps, config.n_samples, config.seed)
    except (BvnError, ValueError):
        samples = []  # relaxation left the polytope; prev/projection still stand
    for i, sample in enumerate(samples):
        candidates.append((_block_from_groups(groups, sample, spec), f"sample_{i}"))
    theta2_cache = {}
    best = None
    for P, label in candidates:
        key = tuple(tuple(p.tolist()) for p in P.perms)
        if key not in theta2_cache:
            theta2_cache[key] = apply_block_permutation(theta2, P)
        score = curve_objective(theta1, theta2_cache[key], tilde_c, pack, config.loss_kind)
        score += perm_prox(P, P_k, config.nu_P)
        if best is None or score < best[2]:
            best = (P, label, score)
    return best[0], best[1], group_mats, best[2]


def _expand_groups(groups, group_mats, spec):
    layer_mats = [None] * (spec.n_layers - 1)
    for g, D in zip(groups, group_mats):
        for l in g:
            layer_mats[l - 1] = D
    return layer_mats


def _block_from_groups(groups, group_perms, spec):
    perms = [None] * (spec.n_layers - 1)
    for g, p in zip(groups, group_perms):
        for l in g:
            perms[l - 1] = np.asarray(p, dtype=int).copy()
    return BlockPermutation(perms)


def phi_subproblem(theta1: Network, theta2p: Network, tilde_c: Network,
                   phi_anchor: Network, dataset, config: PamConfig,
                   lr_scale: float = 1.0, pack: EvalPack = None):
    """One curve half-step: SGD on the control deviation with the proximal
    pull toward ``phi_anchor``.

    In full-batch mode (batch_size >= train size) the gradient and the
    objective use the pack's fixed t grid, and every step is safeguarded
    by backtracking, so the proximal objective cannot increase.
    """
    X, y = dataset.train_arrays()
    n = X.shape[0]
    full_batch = config.batch_size >= n
    if pack is None:
        pack = make_eval_pack(dataset, config)
    tilde_c = tilde_c.copy()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA0]))
    t_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA1]))
    lr = config.phi_lr * lr_scale

    def objective(c):
        return curve_objective(theta1, theta2p, c, pack, config.loss_kind) + control_prox(
            c, phi_anchor, config.nu_phi
        )

    if full_batch:
        current = objective(tilde_c)
        for _ in range(config.curve_epochs):
            grads_w = [np.zeros_like(W) for W in tilde_c.weights]
            grads_b = (
                [np.zeros_like(b) for b in tilde_c.biases]
                if tilde_c.biases is not None
                else None
            )
            for t in pack.t_grid:
                _, gc = control_gradient(
                    theta1, theta2p, tilde_c, pack.X, pack.y, float(t), config.loss_kind
                )
                for l in range(len(grads_w)):
                    grads_w[l] += gc.weights[l] / len(pack.t_grid)
                    if grads_b is not None:
                        grads_b[l] += gc.biases[l] / len(pack.t_grid)
            for l in range(len(grads_w)):
                grads_w[l] += (tilde_c.weights[l] - phi_anchor.weights[l]) / config.nu_phi
                if grads_b is not None:
                    grads_b[l] += (tilde_c.biases[l] - phi_anchor.biases[l]) / config.nu_phi
            step = lr
            while True:
                trial = tilde_c.copy()
                for l in range(len(grads_w)):
                    trial.weights[l] -= step * grads_w[l]
                    if grads_b is not None:
                        trial.biases[l] -= step * grads_b[l]
                val = objective(trial)
                if val <= current:
                    tilde_c, current = trial, val
                    break
                step *= 0.5
                if step < 1e-15:
                    break  # at a stationary point; keep the current iterate
        return tilde_c
    for _ in range(config.curve_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            t0 = float(t_rng.uniform(0.0, 1.0))
            _, gc = control_gradient(
                theta1, theta2p, tilde_c, X[idx], y[idx], t0, config.loss_kind
            )
            for l in range(len(tilde_c.weights)):
                gw = gc.weights[l] + (tilde_c.weights[l] - phi_anchor.weights[l]) / config.nu_phi
                tilde_c.weights[l] -= lr * gw
                if tilde_c.biases is not None:
                    gb = gc.biases[l] + (tilde_c.biases[l] - phi_anchor.biases[l]) / config.nu_phi
                    tilde_c.biases[l] -= lr * gb
    return tilde_c


# ---------------------------------------------------------------------------
# outer loop


def run_pam(theta1: Network, theta2: Network, P_init: BlockPermutation, dataset,
            config: PamConfig):
    """Alternate the permutation and curve subproblems.

    Returns (curve, P_final, log) where the log has one record per
    half-step: {iter, phase, objective, proximal_term, selected_candidate}.
    """
    spec = theta1.spec
    if theta2.spec != spec:
        raise ValueError("endpoints must share one spec")
    pack = make_eval_pack(dataset, config)
    tilde_c = zero_control(spec)
    P = P_init
    theta2p = apply_block_permutation(theta2, P)
    log = [
        {
            "iter": 0,
            "phase": "init",
            "objective": curve_objective(theta1, theta2p, tilde_c, pack, config.loss_kind),
            "proximal_term": 0.0,
            "selected_candidate": None,
        }
    ]
    for k in range(config.outer_iters):
        lr_scale = config.anneal_factor**k
        P_new, label, _, score = perm_subproblem(
            theta1, theta2, tilde_c, P, dataset, config, lr_scale, pack
        )
        theta2p = apply_block_permutation(theta2, P_new)
        prox_P = perm_prox(P_new, P, config.nu_P)
        log.append(
            {
                "iter": k + 1,
                "phase": "perm",
                "objective": score,
                "proximal_term": prox_P,
                "selected_candidate": label,
            }
        )
        anchor = tilde_c.copy()
        tilde_c = phi_subproblem(
            theta1, theta2p, tilde_c, anchor, dataset, config, lr_scale, pack
        )
        prox_phi = control_prox(tilde_c, anchor, config.nu_phi)
        log.append(
            {
                "iter": k + 1,
                "phase": "phi",
                "objective": curve_objective(theta1, theta2p, tilde_c, pack, config.loss_kind)
                + prox_phi,
                "proximal_term": prox_phi,
                "selected_candidate": None,
            }
        )
        P = P_new
    return reparam_curve(theta1, theta2p, tilde_c), P, log
