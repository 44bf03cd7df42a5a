"""Minimal dense feed-forward network engine.

Networks are plain weight/bias arrays plus an architecture spec; all
operations are pure functions of them. Supports optional skip connections
(the layer output of an earlier layer added to a later one every
``residual_period`` layers) and spectral-norm-constrained SGD training.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

ACTIVATIONS = ("relu", "huberized_relu", "tanh", "identity")
LOSS_KINDS = ("cross_entropy", "mse")

# Lipschitz constants of the supported pointwise activations.
ACTIVATION_LIPSCHITZ = {"relu": 1.0, "huberized_relu": 1.0, "tanh": 1.0, "identity": 1.0}


class DimensionError(ValueError):
    """Shape mismatch, naming the offending layer."""


class SpecError(ValueError):
    """Invalid architecture description."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss during training. Carries the last finite network."""

    def __init__(self, message, last_network, epoch, batch):
        super().__init__(message)
        self.last_network = last_network
        self.epoch = epoch
        self.batch = batch


class SpectralNormError(RuntimeError):
    """Power iteration failed to converge. Carries the last residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of a dense feed-forward net.

    ``layer_widths`` runs from input dim m0 to output dim mL, so the net has
    ``len(layer_widths) - 1`` weight matrices. When ``residual_period`` p is
    set, hidden layer l receives the output of layer l-p additively for
    every l in {1+p, 1+2p, ...} (the first layer acts as a stem; the output
    layer never receives a skip).
    """

    layer_widths: tuple
    activation: str = "relu"
    huber_delta: Optional[float] = None
    residual_period: Optional[int] = None
    has_bias: bool = True

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise SpecError("need at least input and output widths")
        if any(w <= 0 for w in widths):
            raise SpecError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.activation == "huberized_relu":
            if self.huber_delta is None or not self.huber_delta > 0:
                raise SpecError("huberized_relu requires huber_delta > 0")
        if self.residual_period is not None:
            if int(self.residual_period) < 1:
                raise SpecError("residual_period must be a positive integer")
            object.__setattr__(self, "residual_period", int(self.residual_period))
            for l in self.skip_layers():
                src = l - self.residual_period
                if widths[l] != widths[src]:
                    raise SpecError(
                        f"skip into layer {l} needs width {widths[src]} == {widths[l]}"
                    )

    @property
    def n_layers(self):
        """Number of weight matrices L."""
        return len(self.layer_widths) - 1

    @property
    def hidden_widths(self):
        return self.layer_widths[1:-1]

    def skip_layers(self):
        """Hidden layers that receive a skip connection (sorted)."""
        if self.residual_period is None:
            return []
        p = self.residual_period
        return [l for l in range(1 + p, self.n_layers, p)]

    def permutation_groups(self):
        """Partition of hidden layers 1..L-1 into groups sharing one permutation.

        Layers joined by a skip connection must be permuted identically for
        the symmetry of the forward map to hold; layers outside any skip
        chain are singleton groups.
        """
        parent = {l: l for l in range(1, self.n_layers)}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for l in self.skip_layers():
            src = l - self.residual_period
            if src >= 1:
                parent[find(l)] = find(src)
        groups = {}
        for l in range(1, self.n_layers):
            groups.setdefault(find(l), []).append(l)
        return [sorted(g) for _, g in sorted(groups.items())]

    def to_dict(self):
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "huber_delta": self.huber_delta,
            "residual_period": self.residual_period,
            "has_bias": self.has_bias,
        }

    @staticmethod
    def from_dict(d):
        return NetworkSpec(
            layer_widths=tuple(d["layer_widths"]),
            activation=d["activation"],
            huber_delta=d.get("huber_delta"),
            residual_period=d.get("residual_period"),
            has_bias=d.get("has_bias", True),
        )


@dataclass
class Network:
    """Concrete weights for a NetworkSpec.

    ``weights[l]`` has shape (m_{l+1}, m_l) (stored 0-indexed for layer
    l+1); ``biases`` is None when the spec has no bias terms.
    """

    spec: NetworkSpec
    weights: list
    biases: Optional[list] = None

    def __post_init__(self):
        L = self.spec.n_layers
        widths = self.spec.layer_widths
        if len(self.weights) != L:
            raise DimensionError(f"expected {L} weight matrices, got {len(self.weights)}")
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        for l, W in enumerate(self.weights, start=1):
            want = (widths[l], widths[l - 1])
            if W.shape != want:
                raise DimensionError(f"layer {l} weight shape {W.shape}, expected {want}")
            if not np.all(np.isfinite(W)):
                raise ValueError(f"layer {l} weights contain non-finite entries")
        if self.spec.has_bias:
            if self.biases is None or len(self.biases) != L:
                raise DimensionError(f"expected {L} bias vectors")
            self.biases = [np.asarray(b, dtype=float) for b in self.biases]
            for l, b in enumerate(self.biases, start=1):
                if b.shape != (widths[l],):
                    raise DimensionError(f"layer {l} bias shape {b.shape}, expected ({widths[l]},)")
                if not np.all(np.isfinite(b)):
                    raise ValueError(f"layer {l} bias contains non-finite entries")
        else:
            self.biases = None

    def copy(self):
        return Network(
            self.spec,
            [W.copy() for W in self.weights],
            None if self.biases is None else [b.copy() for b in self.biases],
        )

    def allclose(self, other, atol=0.0, rtol=0.0):
        if self.spec != other.spec:
            return False
        ok = all(
            np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self.weights, other.weights)
        )
        if ok and self.biases is not None:
            ok = all(
                np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self.biases, other.biases)
            )
        return ok


@dataclass
class Gradients:
    """Same shape family as a Network's weights/biases."""

    weights: list
    biases: Optional[list] = None


@dataclass
class TrainConfig:
    lr: float = 0.1
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.5
    weight_decay: float = 5e-4
    epochs: int = 250
    batch_size: int = 128
    seed: int = 0
    momentum: float = 0.0
    max_weight_spectral_norm: Optional[float] = None
    loss_kind: str = "cross_entropy"

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay_every <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning-rate hyperparameters must be positive")
        if self.batch_size <= 0 or self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("invalid training hyperparameters")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")


# ---------------------------------------------------------------------------
# activations


def activate(spec: NetworkSpec, x):
    a = spec.activation
    if a == "relu":
        return np.maximum(x, 0.0)
    if a == "tanh":
        return np.tanh(x)
    if a == "identity":
        return x
    # huberized relu: C1 three-branch smoothing of relu with width delta
    d = spec.huber_delta
    return np.where(x <= 0.0, 0.0, np.where(x >= d, x - d / 2.0, x * x / (2.0 * d)))


def activate_deriv(spec: NetworkSpec, x):
    a = spec.activation
    if a == "relu":
        return (x > 0.0).astype(float)
    if a == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if a == "identity":
        return np.ones_like(x)
    d = spec.huber_delta
    return np.where(x <= 0.0, 0.0, np.where(x >= d, 1.0, x / d))


# ---------------------------------------------------------------------------
# forward / loss / backward


def _forward_trace(net: Network, X):
    """Forward pass keeping per-layer pre-activations and layer outputs.

    Returns (logits, pres, outs) where pres[l] is the pre-activation of
    layer l (1-indexed; pres[0] is None) and outs[l] the layer output
    after activation and any skip addition (outs[0] is the input).
    """
    spec = net.spec
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.layer_widths[0]:
        raise DimensionError(
            f"input layer expects width {spec.layer_widths[0]}, got shape {X.shape}"
        )
    L = spec.n_layers
    skips = set(spec.skip_layers())
    p = spec.residual_period
    pres = [None] * (L + 1)
    outs = [None] * (L + 1)
    outs[0] = X
    h = X
    for l in range(1, L + 1):
        z = h @ net.weights[l - 1].T
        if net.biases is not None:
            z = z + net.biases[l - 1]
        pres[l] = z
        if l == L:
            outs[l] = z
        else:
            h = activate(spec, z)
            if l in skips:
                h = h + outs[l - p]
            outs[l] = h
    return outs[L], pres, outs


def forward(net: Network, inputs, capture: str = "none"):
    """Evaluate the network; optionally capture hidden-layer activations.

    capture: "none" | "pre_activations" | "post_activations". Captured
    matrices cover hidden layers 1..L-1 in order; post-activations include
    skip additions (they are the values the next layer consumes).
    """
    if capture not in ("none", "pre_activations", "post_activations"):
        raise ValueError(f"unknown capture mode {capture!r}")
    logits, pres, outs = _forward_trace(net, inputs)
    if capture == "none":
        return logits, None
    L = net.spec.n_layers
    if capture == "pre_activations":
        return logits, [pres[l] for l in range(1, L)]
    return logits, [outs[l] for l in range(1, L)]


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"labels shape {labels.shape} vs logits {logits.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return labels.astype(int)


def loss(logits, labels, kind: str = "cross_entropy"):
    """Mean loss over samples. cross_entropy is softmax CE over logits;
    mse is the squared L2 distance to the one-hot target."""
    logits = np.asarray(logits, dtype=float)
    labels = _check_labels(logits, labels)
    if kind == "cross_entropy":
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        return float(np.mean(lse - logits[np.arange(len(labels)), labels]))
    if kind == "mse":
        onehot = np.zeros_like(logits)
        onehot[np.arange(len(labels)), labels] = 1.0
        return float(np.mean(np.sum((logits - onehot) ** 2, axis=1)))
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_grad(logits, labels, kind: str = "cross_entropy"):
    """Gradient of the mean loss w.r.t. the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = _check_labels(logits, labels)
    n = logits.shape[0]
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    if kind == "cross_entropy":
        zmax = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - zmax)
        p = e / e.sum(axis=1, keepdims=True)
        return (p - onehot) / n
    if kind == "mse":
        return 2.0 * (logits - onehot) / n
    raise ValueError(f"unknown loss kind {kind!r}")


def accuracy(logits, labels):
    labels = _check_labels(np.asarray(logits), labels)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def backward(net: Network, inputs, labels, kind: str = "cross_entropy"):
    """Exact gradient of the mean loss w.r.t. all weights and biases."""
    g, _ = _backward_full(net, inputs, labels, kind)
    return g


def input_gradient(net: Network, inputs, labels, kind: str = "cross_entropy"):
    """Gradient of the mean loss w.r.t. the inputs (for PGD attacks)."""
    _, gx = _backward_full(net, inputs, labels, kind)
    return gx


def _backward_full(net: Network, inputs, labels, kind):
    X = np.asarray(inputs, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    logits, pres, outs = _forward_trace(net, X)
    spec = net.spec
    L = spec.n_layers
    skips = set(spec.skip_layers())
    p = spec.residual_period
    dW = [None] * L
    db = [None] * L if net.biases is not None else None
    # d_out[l]: gradient w.r.t. the output of layer l (input for l = 0)
    d_out = [None] * (L + 1)
    d_out[L] = loss_grad(logits, labels, kind)
    for l in range(L, 0, -1):
        if l == L:
            dz = d_out[l]
        else:
            dz = d_out[l] * activate_deriv(spec, pres[l])
            if l in skips:
                # skip path: output of layer l-p feeds layer l additively
                src = l - p
                if d_out[src] is None:
                    d_out[src] = d_out[l].copy()
                else:
                    d_out[src] = d_out[src] + d_out[l]
        dW[l - 1] = dz.T @ outs[l - 1]
        if db is not None:
            db[l - 1] = dz.sum(axis=0)
        prev = dz @ net.weights[l - 1]
        if d_out[l - 1] is None:
            d_out[l - 1] = prev
        else:
            d_out[l - 1] = d_out[l - 1] + prev
    return Gradients(dW, db), d_out[0]


# ---------------------------------------------------------------------------
# parameter-vector view


def params_to_vector(net: Network):
    parts = [W.ravel() for W in net.weights]
    if net.biases is not None:
        parts += [b.ravel() for b in net.biases]
    return np.concatenate(parts)


def vector_to_params(spec: NetworkSpec, vec):
    vec = np.asarray(vec, dtype=float)
    widths = spec.layer_widths
    weights, biases = [], []
    i = 0
    for l in range(1, spec.n_layers + 1):
        n = widths[l] * widths[l - 1]
        weights.append(vec[i : i + n].reshape(widths[l], widths[l - 1]))
        i += n
    if spec.has_bias:
        for l in range(1, spec.n_layers + 1):
            biases.append(vec[i : i + widths[l]].copy())
            i += widths[l]
    if i != vec.size:
        raise DimensionError(f"vector length {vec.size}, expected {i}")
    return Network(spec, weights, biases if spec.has_bias else None)


def grad_to_vector(spec: NetworkSpec, g: Gradients):
    parts = [W.ravel() for W in g.weights]
    if g.biases is not None:
        parts += [b.ravel() for b in g.biases]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# init / training


def init_network(spec: NetworkSpec, rng: np.random.Generator) -> Network:
    """Kaiming-uniform init scaled by fan-in; biases zero."""
    weights, biases = [], []
    widths = spec.layer_widths
    for l in range(1, spec.n_layers + 1):
        fan_in = widths[l - 1]
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(widths[l], widths[l - 1])))
        biases.append(np.zeros(widths[l]))
    return Network(spec, weights, biases if spec.has_bias else None)


def clamp_spectral_norms(net: Network, bound: float, tol: float = 1e-10):
    """Rescale any weight matrix whose spectral norm exceeds ``bound``."""
    for W in net.weights:
        s = spectral_norm(W, tol=tol)
        if s > bound:
            W *= bound / s


def train_sgd(net: Network, dataset, config: TrainConfig):
    """SGD with step-decayed lr and L2 weight decay. Deterministic per seed.

    Returns (trained network, per-epoch log). Raises TrainingDivergedError
    (carrying the last finite network) if the loss goes non-finite.
    """
    X, y = dataset.train_arrays()
    return _sgd_loop(net, X, y, config)


def _sgd_loop(net: Network, X, y, config: TrainConfig, attack=None, attack_seed=0):
    """Shared SGD loop; ``attack`` optionally perturbs each batch first."""
    net = net.copy()
    if config.epochs == 0:
        return net, []
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5D0]))
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty training split")
    vel_w = [np.zeros_like(W) for W in net.weights]
    vel_b = [np.zeros_like(b) for b in net.biases] if net.biases is not None else None
    log = []
    attack_rng = np.random.default_rng(np.random.SeedSequence([attack_seed, 0xADA])) if attack else None
    for epoch in range(config.epochs):
        lr = config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], y[idx]
            if attack is not None:
                xb = attack(net, xb, yb, attack_rng)
            logits, _ = forward(net, xb)
            batch_loss = loss(logits, yb, config.loss_kind)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}",
                    net.copy(), epoch, start // config.batch_size,
                )
            epoch_loss += batch_loss * len(idx)
            epoch_correct += accuracy(logits, yb) * len(idx)
            g = backward(net, xb, yb, config.loss_kind)
            for l in range(len(net.weights)):
                gw = g.weights[l] + config.weight_decay * net.weights[l]
                vel_w[l] = config.momentum * vel_w[l] - lr * gw
                net.weights[l] += vel_w[l]
                if net.biases is not None:
                    vel_b[l] = config.momentum * vel_b[l] - lr * g.biases[l]
                    net.biases[l] += vel_b[l]
            if config.max_weight_spectral_norm is not None:
                clamp_spectral_norms(net, config.max_weight_spectral_norm)
        log.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / n,
                "train_acc": epoch_correct / n,
            }
        )
    return net, log


# ---------------------------------------------------------------------------
# spectral norm


def spectral_norm(matrix, tol: float = 1e-10, max_iters: int = 10000) -> float:
    """Largest singular value via power iteration with a seeded start.

    Converges when the estimate changes by less than tol (relative to its
    magnitude) on two consecutive iterations.
    """
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2 or A.size == 0:
        raise ValueError("spectral_norm needs a nonempty 2-D matrix")
    rng = np.random.default_rng(np.random.SeedSequence([0x5EC, A.shape[0], A.shape[1]]))
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    stable = 0
    for _ in range(max_iters):
        u = A @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0  # start vector in the null space of a zero map
        u /= nu
        v = A.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        new_sigma = float(u @ (A @ v))
        if abs(new_sigma - sigma) <= tol * max(1.0, abs(new_sigma)):
            stable += 1
            if stable >= 2:
                return new_sigma
        else:
            stable = 0
        sigma = new_sigma
    residual = float(np.linalg.norm(A @ v - sigma * u))
    raise SpectralNormError(
        f"power iteration did not converge in {max_iters} iterations (residual {residual:.3e})",
        residual,
    )
