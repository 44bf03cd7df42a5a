"""L-infinity PGD attacks, adversarial training, and robust curve metrics."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .curves import BezierCurve, CurveMetrics, CurveTrainConfig, evaluate_curve, train_curve
from .nets import Network, TrainConfig, input_gradient, _sgd_loop


@dataclass
class PGDConfig:
    epsilon: float
    step_size: float
    n_steps: int = 10
    random_start: bool = True
    clip_range: Optional[tuple] = None

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size <= 0 or self.n_steps < 1:
            raise ValueError("need epsilon >= 0, step_size > 0, n_steps >= 1")
        if self.clip_range is not None and not self.clip_range[0] < self.clip_range[1]:
            raise ValueError("clip_range must be an increasing (lo, hi) pair")


def default_pgd_config(dataset, epsilon_scale: float = 0.1, n_steps: int = 10,
                       random_start: bool = True) -> PGDConfig:
    """Budget scaled to the dataset's feature range, step = epsilon / 4."""
    eps = epsilon_scale * dataset.feature_range()
    return PGDConfig(epsilon=eps, step_size=eps / 4.0, n_steps=n_steps,
                     random_start=random_start)


def pgd_attack(net: Network, batch, labels, config: PGDConfig, rng=None,
               loss_kind: str = "cross_entropy"):
    """Iterated sign-gradient ascent on the loss, projected onto the
    L-inf ball of radius epsilon around the batch (and the clip box when
    set) after every step."""
    x0 = np.asarray(batch, dtype=float)
    if config.epsilon == 0.0:
        return x0.copy()
    if rng is None:
        rng = np.random.default_rng(0)
    if config.random_start:
        x = x0 + rng.uniform(-config.epsilon, config.epsilon, size=x0.shape)
        x = _project(x, x0, config)
    else:
        x = x0.copy()
    for _ in range(config.n_steps):
        g = input_gradient(net, x, labels, loss_kind)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient during PGD")
        x = x + config.step_size * np.sign(g)
        x = _project(x, x0, config)
    return x


def _project(x, x0, config: PGDConfig):
    x = np.clip(x, x0 - config.epsilon, x0 + config.epsilon)
    if config.clip_range is not None:
        x = np.clip(x, config.clip_range[0], config.clip_range[1])
    return x


def adversarial_train(net: Network, dataset, config: TrainConfig, attack: PGDConfig,
                      attack_seed: int = 0):
    """SGD where every batch is replaced by its PGD perturbation against
    the current network before the gradient step."""
    X, y = dataset.train_arrays()

    def perturb(current, xb, yb, rng):
        return pgd_attack(current, xb, yb, attack, rng, config.loss_kind)

    return _sgd_loop(net, X, y, config, attack=perturb, attack_seed=attack_seed)


def train_robust_curve(curve: BezierCurve, dataset, config: CurveTrainConfig,
                       attack: PGDConfig, attack_seed: int = 0):
    """Curve training where each batch is attacked against the sampled
    network r(t0) before the control-point step."""

    def perturb(point, xb, yb, rng):
        return pgd_attack(point, xb, yb, attack, rng, config.loss_kind)

    return train_curve(curve, dataset, config, attack=perturb, attack_seed=attack_seed)


def robust_curve_report(curve: BezierCurve, dataset, t_grid=None, attack: PGDConfig = None,
                        attack_seed: int = 0, split: str = "validation",
                        loss_kind: str = "cross_entropy"):
    """Clean and robust metrics along the curve; each grid-point network
    is attacked independently."""
    clean = evaluate_curve(curve, dataset, t_grid, split=split, loss_kind=loss_kind)
    if attack is None:
        return clean, clean

    def perturb(point, xb, yb, rng):
        return pgd_attack(point, xb, yb, attack, rng, loss_kind)

    robust = evaluate_curve(curve, dataset, t_grid, attack=perturb,
                            attack_seed=attack_seed, split=split, loss_kind=loss_kind)
    return clean, robust


def evaluate_robust(net: Network, dataset, attack: PGDConfig, attack_seed: int = 0,
                    split: str = "validation", loss_kind: str = "cross_entropy"):
    """(clean_loss, clean_acc, robust_loss, robust_acc) of one network."""
    from .nets import accuracy, forward, loss

    X, y = dataset.validation_arrays() if split == "validation" else dataset.train_arrays()
    logits, _ = forward(net, X)
    rng = np.random.default_rng(np.random.SeedSequence([attack_seed, 0xADA]))
    xadv = pgd_attack(net, X, y, attack, rng, loss_kind)
    adv_logits, _ = forward(net, xadv)
    return (
        loss(logits, y, loss_kind),
        accuracy(logits, y),
        loss(adv_logits, y, loss_kind),
        accuracy(adv_logits, y),
    )
