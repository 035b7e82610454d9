"""Feature-space augmentations with soft-label bookkeeping.

Every function accepts either integer labels (with ``num_classes``) or an
existing soft-target matrix, so policies can be chained within one batch.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .datamodel import one_hot
from .errors import ConfigError

AUGMENT_KINDS = ("mixup", "cutmix_mask", "gaussian_noise", "cutout_mask", "none")


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str
    alpha: float = 1.0
    sigma: float = 0.1
    mask_fraction: float = 0.25
    apply_probability: float = 1.0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ConfigError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError("apply_probability must lie in [0, 1]")
        if self.kind in ("mixup", "cutmix_mask") and not self.alpha > 0:
            raise ConfigError(f"{self.kind} needs alpha > 0")
        if self.kind == "gaussian_noise" and not self.sigma > 0:
            raise ConfigError("gaussian_noise needs sigma > 0")
        if self.kind == "cutout_mask" and not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError("cutout_mask needs 0 < mask_fraction < 1")

    @classmethod
    def from_dict(cls, cfg: dict) -> "AugmentPolicy":
        allowed = {"kind", "alpha", "sigma", "mask_fraction", "apply_probability"}
        unknown = set(cfg) - allowed
        if unknown:
            raise ConfigError(f"unknown augmentation keys: {sorted(unknown)}")
        return cls(**cfg)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "alpha": self.alpha,
            "sigma": self.sigma,
            "mask_fraction": self.mask_fraction,
            "apply_probability": self.apply_probability,
        }


@dataclass
class AugmentedBatch:
    features: np.ndarray
    soft_targets: np.ndarray
    used_soft_labels: bool = False


def _targets(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    if num_classes is None:
        raise ValueError("num_classes is required with integer labels")
    return one_hot(labels, num_classes)


def _is_hard(targets):
    return bool(np.all((targets == 0.0) | (targets == 1.0)))


def mixup(features, labels, alpha: float = 1.0, seed=None, *, num_classes=None, lam=None, perm=None):
    """Convex combination of each row with a permuted partner.

    One mixing weight ``lam ~ Beta(alpha, alpha)`` is drawn per batch; row i
    becomes ``lam * x[i] + (1 - lam) * x[perm[i]]`` and its target the same
    combination of the two one-hot (or soft) targets.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("mixup needs at least 2 rows")
    y = _targets(labels, num_classes)
    rng = np.random.default_rng(seed)
    if lam is None:
        lam = rng.beta(alpha, alpha)
    if perm is None:
        perm = rng.permutation(n)
    perm = np.asarray(perm)
    return AugmentedBatch(
        features=lam * x + (1.0 - lam) * x[perm],
        soft_targets=lam * y + (1.0 - lam) * y[perm],
        used_soft_labels=True,
    )


def cutmix_mask(features, labels, alpha: float = 1.0, seed=None, *, num_classes=None, block=None, perm=None):
    """Replace a contiguous coordinate block of each row with its partner's values.

    The block length is ``round((1 - lam) * d)`` with ``lam ~ Beta(alpha, alpha)``
    and its start is uniform per row. ``block=(start, stop)`` pins the block for
    every row. Targets mix as ``(1 - f) * y[i] + f * y[perm[i]]`` with
    ``f = length / d``.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if n < 2 or d < 2:
        raise ValueError("cutmix_mask needs at least 2 rows and 2 coordinates")
    y = _targets(labels, num_classes)
    rng = np.random.default_rng(seed)
    if perm is None:
        perm = rng.permutation(n)
    perm = np.asarray(perm)
    if block is None:
        lam = rng.beta(alpha, alpha)
        length = int(round((1.0 - lam) * d))
        starts = rng.integers(0, d - length + 1, size=n)
    else:
        start, stop = block
        if not 0 <= start <= stop <= d:
            raise ValueError(f"block {block} outside [0, {d}]")
        length = stop - start
        starts = np.full(n, start)
    cols = np.arange(d)
    mask = (cols >= starts[:, None]) & (cols < starts[:, None] + length)
    f = length / d
    return AugmentedBatch(
        features=np.where(mask, x[perm], x),
        soft_targets=(1.0 - f) * y + f * y[perm],
        used_soft_labels=True,
    )


def gaussian_noise(features, labels, sigma: float = 0.1, seed=None, *, num_classes=None):
    """Add i.i.d. noise with std ``sigma * mean_row_norm / sqrt(d)``."""
    x = np.asarray(features, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    y = _targets(labels, num_classes)
    rng = np.random.default_rng(seed)
    scale = sigma * np.linalg.norm(x, axis=1).mean() / np.sqrt(x.shape[1])
    noise = rng.standard_normal(x.shape)
    return AugmentedBatch(x + scale * noise, y, used_soft_labels=not _is_hard(y))


def cutout_mask(features, labels, mask_fraction: float = 0.25, seed=None, *, num_classes=None):
    """Zero ``floor(mask_fraction * d)`` contiguous coordinates per row (random start)."""
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    y = _targets(labels, num_classes)
    length = int(np.floor(mask_fraction * d))
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, d - length + 1, size=n)
    cols = np.arange(d)
    mask = (cols >= starts[:, None]) & (cols < starts[:, None] + length)
    return AugmentedBatch(np.where(mask, 0.0, x), y, used_soft_labels=not _is_hard(y))


def apply_policy(policy: AugmentPolicy, features, labels, seed=None, *, num_classes=None, counter: Counter | None = None):
    """Apply ``policy`` with probability ``policy.apply_probability``.

    ``counter[policy.kind]`` is incremented each time the augmentation fires.
    """
    if not isinstance(policy, AugmentPolicy) or policy.kind not in AUGMENT_KINDS:
        raise ConfigError(f"unknown augmentation policy {policy!r}")
    rng = np.random.default_rng(seed)
    y = _targets(labels, num_classes)
    x = np.asarray(features, dtype=np.float64)
    fire = policy.kind != "none" and rng.random() < policy.apply_probability
    if not fire:
        return AugmentedBatch(x, y, used_soft_labels=not _is_hard(y))
    if counter is not None:
        counter[policy.kind] += 1
    if policy.kind == "mixup":
        return mixup(x, y, policy.alpha, rng)
    if policy.kind == "cutmix_mask":
        return cutmix_mask(x, y, policy.alpha, rng)
    if policy.kind == "gaussian_noise":
        return gaussian_noise(x, y, policy.sigma, rng)
    return cutout_mask(x, y, policy.mask_fraction, rng)


# Named policy bundles used in protocol names. The "-analog" entries stand in
# for image-space AugMix / RandAug, which have no meaning on embeddings.
NAMED_AUGMENTATIONS = {
    "mixup": (AugmentPolicy("mixup", alpha=1.0),),
    "cutmix": (AugmentPolicy("cutmix_mask", alpha=1.0),),
    "noise": (AugmentPolicy("gaussian_noise", sigma=0.3),),
    "cutout": (AugmentPolicy("cutout_mask", mask_fraction=0.25),),
    "augmix-analog": (
        AugmentPolicy("gaussian_noise", sigma=0.2, apply_probability=0.5),
        AugmentPolicy("cutout_mask", mask_fraction=0.125, apply_probability=0.5),
    ),
    "randaug-analog": (
        AugmentPolicy("gaussian_noise", sigma=0.3, apply_probability=0.8),
        AugmentPolicy("cutout_mask", mask_fraction=0.25, apply_probability=0.3),
    ),
}
NAMED_AUGMENTATIONS["cutmix_mask"] = NAMED_AUGMENTATIONS["cutmix"]
NAMED_AUGMENTATIONS["gaussian_noise"] = NAMED_AUGMENTATIONS["noise"]
NAMED_AUGMENTATIONS["cutout_mask"] = NAMED_AUGMENTATIONS["cutout"]


def named_policies(name: str) -> tuple[AugmentPolicy, ...]:
    try:
        return NAMED_AUGMENTATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown augmentation name {name!r}") from None
