"""Virtual adversarial training on the penultimate representation.

The classifier head is a single dense layer (an :class:`~adaptlab.nn.MLP`
with one layer). For a head ``logits = z W^T + b`` the gradient of
``KL(p(z) || p(z + r))`` with respect to ``r`` is ``(p(z + r) - p(z)) W``,
which is all the power iteration needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ShapeError

GRAD_UNDERFLOW = 1e-12


@dataclass(frozen=True)
class VatConfig:
    epsilon_rel: float = 0.05
    xi: float = 1e-6
    power_iters: int = 1
    alpha: float = 1.0

    def __post_init__(self):
        if not self.epsilon_rel > 0:
            raise ValueError("epsilon_rel must be positive")
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if int(self.power_iters) != self.power_iters or self.power_iters < 1:
            raise ValueError("power_iters must be an integer >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")

    @classmethod
    def from_dict(cls, cfg: dict) -> "VatConfig":
        return cls(**cfg)

    def to_dict(self) -> dict:
        return {"epsilon_rel": self.epsilon_rel, "xi": self.xi, "power_iters": self.power_iters, "alpha": self.alpha}


def _check_head(head: nn.MLP, z) -> np.ndarray:
    if len(head.layers) != 1:
        raise ShapeError("the VAT head must be a single dense layer")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != head.in_dim:
        raise ShapeError(f"representation shape {z.shape} does not match head input width {head.in_dim}")
    return z


def _probs(head, z):
    # same forward path as the loss, so a zero-radius perturbation gives exactly zero KL
    return nn.softmax(nn.forward_cache(head, z)[0])


def _unit_rows(v):
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def vat_direction(head: nn.MLP, z, config: VatConfig, seed=None) -> np.ndarray:
    """Per-row adversarial directions by power iteration.

    Starting from a random unit vector ``d``, each iteration replaces ``d`` with
    the normalized gradient of ``KL(p(z) || p(z + r))`` at ``r = xi * |z| * d``.
    Rows whose gradient norm underflows keep their current direction.
    """
    z = _check_head(head, z)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(z.shape)
    # guard against an all-zero draw, which has probability zero but is cheap to rule out
    d[np.linalg.norm(d, axis=1) == 0, 0] = 1.0
    d = _unit_rows(d)
    W, _ = head.layers[0]
    p = _probs(head, z)
    probe = config.xi * np.linalg.norm(z, axis=1, keepdims=True)
    for _ in range(config.power_iters):
        q = _probs(head, z + probe * d)
        grad = (q - p) @ W
        norms = np.linalg.norm(grad, axis=1, keepdims=True)
        ok = norms[:, 0] >= GRAD_UNDERFLOW
        d[ok] = grad[ok] / norms[ok]
    return d


def epsilon_abs(z, config: VatConfig) -> float:
    """Perturbation radius: ``epsilon_rel`` times the batch-mean row norm of ``z``."""
    return float(config.epsilon_rel * np.linalg.norm(np.asarray(z, dtype=np.float64), axis=1).mean())


def lds_loss(head: nn.MLP, z, directions, epsilon_abs: float) -> float:
    """Mean KL(p(z) || p(z + eps * d)) over rows."""
    loss, _ = lds_loss_and_grad(head, z, directions, epsilon_abs)
    return loss


def lds_loss_and_grad(head: nn.MLP, z, directions, epsilon_abs: float):
    """LDS loss and its head gradient; the clean branch is treated as a constant."""
    z = _check_head(head, z)
    directions = np.asarray(directions, dtype=np.float64)
    if directions.shape != z.shape:
        raise ShapeError(f"directions shape {directions.shape} does not match {z.shape}")
    if epsilon_abs < 0:
        raise ValueError("epsilon_abs must be nonnegative")
    clean = _probs(head, z)
    grads, loss = nn.backward(head, z + epsilon_abs * directions, "kl_to_reference", clean)
    return loss, grads


def vat_augmented_objective(head: nn.MLP, z, labels, config: VatConfig, seed=None, directions=None):
    """``cross_entropy + alpha * lds_loss`` and its gradient w.r.t. the head.

    ``directions`` may be supplied to hold the adversarial direction fixed
    (it is treated as a constant in the gradient either way).
    """
    z = _check_head(head, z)
    grads, loss = nn.backward(head, z, "cross_entropy", labels)
    if config.alpha == 0:
        return loss, grads
    if directions is None:
        directions = vat_direction(head, z, config, seed)
    lds, lds_grads = lds_loss_and_grad(head, z, directions, epsilon_abs(z, config))
    return loss + config.alpha * lds, grads + lds_grads.scale(config.alpha)


def detached_objective(head: nn.MLP, z, labels, config: VatConfig, directions, clean) -> float:
    """VAT objective value with the clean-branch probabilities ``clean`` held constant.

    Its derivative w.r.t. the head equals the gradient returned by
    :func:`vat_augmented_objective`, which makes it the right target for
    finite differences.
    """
    z = _check_head(head, z)
    loss = nn.loss_value(head, z, "cross_entropy", labels)
    if config.alpha == 0:
        return loss
    perturbed = z + epsilon_abs(z, config) * np.asarray(directions, dtype=np.float64)
    return loss + config.alpha * nn.loss_value(head, perturbed, "kl_to_reference", clean)


def vat_gradient_check(head: nn.MLP, z, labels, config: VatConfig, seed=0, step: float = 1e-5) -> float:
    """Max relative error of the VAT objective gradient against central differences.

    Directions and the clean-branch probabilities are computed once at the
    unperturbed parameters and held fixed, matching their stop-gradient
    treatment in training.
    """
    head = head.copy()
    z = _check_head(head, z)
    directions = vat_direction(head, z, config, seed)
    clean = _probs(head, z)
    _, grads = vat_augmented_objective(head, z, labels, config, directions=directions)
    params = [arr for layer in head.layers for arr in layer]
    numeric = nn.numeric_gradient(lambda: detached_objective(head, z, labels, config, directions, clean), params, step)
    analytic = [arr for layer in grads.layers for arr in layer]
    return float(max(nn.relative_error(a, n).max() for a, n in zip(analytic, numeric)))
