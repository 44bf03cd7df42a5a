"""Quadratic Bezier curves between two networks in parameter space.

The curve r(t) = (1-t)^2 theta1 + 2(1-t)t theta_c + t^2 theta2 has fixed
endpoints and one trainable control point. Training samples one t per
batch and chains the batch gradient through the Bezier coefficient
2(1-t)t of the control point.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nets import (
    DimensionError,
    Network,
    TrainingDivergedError,
    accuracy,
    backward,
    forward,
    loss,
    params_to_vector,
    vector_to_params,
)


def combine_networks(coeff_nets) -> Network:
    """Elementwise linear combination sum(c * net) of same-spec networks."""
    (c0, n0) = coeff_nets[0]
    spec = n0.spec
    weights = [c0 * W for W in n0.weights]
    biases = [c0 * b for b in n0.biases] if n0.biases is not None else None
    for c, net in coeff_nets[1:]:
        if net.spec != spec:
            raise DimensionError("networks must share one spec")
        for l in range(len(weights)):
            weights[l] += c * net.weights[l]
            if biases is not None:
                biases[l] += c * net.biases[l]
    return Network(spec, weights, biases)


@dataclass
class BezierCurve:
    theta1: Network
    theta2: Network
    control: Network

    def __post_init__(self):
        if self.theta1.spec != self.theta2.spec or self.theta1.spec != self.control.spec:
            raise DimensionError("curve endpoints and control must share one spec")

    @property
    def spec(self):
        return self.theta1.spec

    def copy(self):
        return BezierCurve(self.theta1, self.theta2, self.control.copy())


def curve_point(curve: BezierCurve, t: float) -> Network:
    """Network at parameter t of the curve."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t = {t} outside [0, 1]")
    if t == 0.0:
        return curve.theta1.copy()
    if t == 1.0:
        return curve.theta2.copy()
    return combine_networks(
        [((1 - t) ** 2, curve.theta1), (2 * (1 - t) * t, curve.control), (t**2, curve.theta2)]
    )


def init_linear(theta1: Network, theta2: Network) -> BezierCurve:
    """Curve whose initial shape is the straight segment: control is the
    midpoint of the endpoints."""
    control = combine_networks([(0.5, theta1), (0.5, theta2)])
    return BezierCurve(theta1, theta2, control)


@dataclass
class CurveTrainConfig:
    lr: float = 1e-2
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.5
    epochs: int = 250
    batch_size: int = 128
    seed: int = 0
    momentum: float = 0.0
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("invalid curve training hyperparameters")


def train_curve(curve: BezierCurve, dataset, config: CurveTrainConfig,
                attack=None, attack_seed=0):
    """Optimize the control point so loss is low along the whole curve.

    Per batch: draw t0 ~ U(0,1), materialize r(t0), optionally replace the
    batch by its adversarial perturbation against r(t0), and take an SGD
    step on the control point (chain factor 2(1-t0)t0). Endpoints are
    never touched.
    """
    curve = curve.copy()
    if config.epochs == 0:
        return curve, []
    X, y = dataset.train_arrays()
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training split")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0B]))
    t_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0C]))
    attack_rng = (
        np.random.default_rng(np.random.SeedSequence([attack_seed, 0xADA])) if attack else None
    )
    vel_w = [np.zeros_like(W) for W in curve.control.weights]
    vel_b = (
        [np.zeros_like(b) for b in curve.control.biases]
        if curve.control.biases is not None
        else None
    )
    log = []
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], y[idx]
            t0 = float(t_rng.uniform(0.0, 1.0))
            point = combine_networks(
                [
                    ((1 - t0) ** 2, curve.theta1),
                    (2 * (1 - t0) * t0, curve.control),
                    (t0**2, curve.theta2),
                ]
            )
            if attack is not None:
                xb = attack(point, xb, yb, attack_rng)
            logits, _ = forward(point, xb)
            batch_loss = loss(logits, yb, config.loss_kind)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite curve loss at epoch {epoch}", curve.control.copy(), epoch,
                    start // config.batch_size,
                )
            epoch_loss += batch_loss * len(idx)
            g = backward(point, xb, yb, config.loss_kind)
            coeff = 2 * (1 - t0) * t0
            for l in range(len(curve.control.weights)):
                vel_w[l] = config.momentum * vel_w[l] - lr * coeff * g.weights[l]
                curve.control.weights[l] += vel_w[l]
                if vel_b is not None:
                    vel_b[l] = config.momentum * vel_b[l] - lr * coeff * g.biases[l]
                    curve.control.biases[l] += vel_b[l]
        log.append({"epoch": epoch, "lr": lr, "train_loss": epoch_loss / n})
    return curve, log


@dataclass
class CurveMetrics:
    t_grid: np.ndarray
    loss: np.ndarray
    accuracy: np.ndarray
    max_barrier: float
    min_accuracy: float

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.loss = np.asarray(self.loss, dtype=float)
        self.accuracy = np.asarray(self.accuracy, dtype=float)
        if self.t_grid.size < 2 or self.t_grid[0] != 0.0 or self.t_grid[-1] != 1.0:
            raise ValueError("t grid must be sorted and include 0 and 1")
        if np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t grid must be strictly increasing")
        if self.loss.shape != self.t_grid.shape or self.accuracy.shape != self.t_grid.shape:
            raise ValueError("metric vectors must match the grid length")


def default_grid(n_points: int = 21):
    return np.linspace(0.0, 1.0, n_points)


def evaluate_curve(curve: BezierCurve, dataset, t_grid=None, attack=None,
                   attack_seed=0, split="validation", loss_kind="cross_entropy") -> CurveMetrics:
    """Loss/accuracy along the curve; the barrier is measured against the
    linear interpolation of the endpoint losses."""
    if t_grid is None:
        t_grid = default_grid()
    t_grid = np.asarray(t_grid, dtype=float)
    if split == "validation":
        X, y = dataset.validation_arrays()
    elif split == "train":
        X, y = dataset.train_arrays()
    else:
        raise ValueError(f"unknown split {split!r}")
    losses, accs = [], []
    for t in t_grid:
        point = curve_point(curve, float(t))
        xb = X
        if attack is not None:
            attack_rng = np.random.default_rng(np.random.SeedSequence([attack_seed, 0xADA]))
            xb = attack(point, X, y, attack_rng)
        logits, _ = forward(point, xb)
        losses.append(loss(logits, y, loss_kind))
        accs.append(accuracy(logits, y))
    losses = np.array(losses)
    accs = np.array(accs)
    baseline = (1 - t_grid) * losses[0] + t_grid * losses[-1]
    return CurveMetrics(
        t_grid=t_grid,
        loss=losses,
        accuracy=accs,
        max_barrier=float(np.max(losses - baseline)),
        min_accuracy=float(np.min(accs)),
    )


# ---------------------------------------------------------------------------
# plane through three networks


@dataclass
class PlaneGrid:
    u: np.ndarray          # grid coordinates along e1
    v: np.ndarray          # grid coordinates along e2
    loss: np.ndarray       # shape (len(v), len(u))
    accuracy: np.ndarray
    anchors: dict          # name -> (u, v) of theta1/theta2/theta3


def plane_coordinates(theta1: Network, theta2: Network, theta3: Network):
    """Orthonormal in-plane basis by Gram-Schmidt and the 2-D coordinates
    of the three anchor networks."""
    p1 = params_to_vector(theta1)
    d2 = params_to_vector(theta2) - p1
    d3 = params_to_vector(theta3) - p1
    n2 = np.linalg.norm(d2)
    if n2 < 1e-10:
        raise ValueError("theta2 coincides with theta1; plane is degenerate")
    e1 = d2 / n2
    u3 = float(d3 @ e1)
    resid = d3 - u3 * e1
    n3 = np.linalg.norm(resid)
    if n3 < 1e-10:
        raise ValueError("theta3 is colinear with theta1 and theta2; plane is degenerate")
    e2 = resid / n3
    coords = {"theta1": (0.0, 0.0), "theta2": (float(n2), 0.0), "theta3": (u3, float(n3))}
    return e1, e2, coords


def plane_grid(theta1: Network, theta2: Network, theta3: Network, dataset,
               resolution: int = 21, margin: float = 0.2, split="validation",
               loss_kind="cross_entropy") -> PlaneGrid:
    """Evaluate loss/accuracy on the plane spanned by three networks.

    The grid covers the bounding box of the three anchor coordinates,
    expanded by ``margin`` (a fraction of each box edge) on every side.
    """
    e1, e2, coords = plane_coordinates(theta1, theta2, theta3)
    p1 = params_to_vector(theta1)
    us = np.array([c[0] for c in coords.values()])
    vs = np.array([c[1] for c in coords.values()])
    du, dv = us.max() - us.min(), vs.max() - vs.min()
    u_axis = np.linspace(us.min() - margin * du, us.max() + margin * du, resolution)
    v_axis = np.linspace(vs.min() - margin * dv, vs.max() + margin * dv, resolution)
    if split == "validation":
        X, y = dataset.validation_arrays()
    else:
        X, y = dataset.train_arrays()
    loss_grid = np.empty((resolution, resolution))
    acc_grid = np.empty((resolution, resolution))
    spec = theta1.spec
    for iv, v in enumerate(v_axis):
        for iu, u in enumerate(u_axis):
            net = vector_to_params(spec, p1 + u * e1 + v * e2)
            logits, _ = forward(net, X)
            loss_grid[iv, iu] = loss(logits, y, loss_kind)
            acc_grid[iv, iu] = accuracy(logits, y)
    return PlaneGrid(u=u_axis, v=v_axis, loss=loss_grid, accuracy=acc_grid, anchors=coords)


def evaluate_at_plane_point(theta1: Network, e1, e2, u, v, dataset,
                            split="validation", loss_kind="cross_entropy"):
    """Loss/accuracy of the network at plane coordinates (u, v)."""
    p1 = params_to_vector(theta1)
    net = vector_to_params(theta1.spec, p1 + u * e1 + v * e2)
    X, y = dataset.validation_arrays() if split == "validation" else dataset.train_arrays()
    logits, _ = forward(net, X)
    return loss(logits, y, loss_kind), accuracy(logits, y)
