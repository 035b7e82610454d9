"""Synthetic embedding benchmark with a controlled distribution shift.

Classes are Gaussian clusters in a low-dimensional latent space. ID inputs
embed the latent space through an orthonormal basis ``U_id``; OOD inputs use
``U_ood = cos(t) U_id + sin(t) V`` with ``V`` orthogonal to ``U_id`` and
``t = shift_strength * pi / 4``, plus a mean offset. ID and OOD therefore share
class structure but their discriminative subspaces only partially overlap:
fine-tuning that adapts the trunk along ``U_id`` alone leaves the ``V`` part of
OOD inputs on stale features.

The source task used for pretraining draws half its rows from each embedding
and labels them with a separate set of latent cluster centers, so the
pretrained trunk is useful for ID and OOD alike without being tuned to the ID
classes.

Corruption severities (``rms`` = root-mean-square feature value of the input
dataset, ``s`` = severity):

========  =====================================================
gauss     add N(0, (0.15 s rms)^2) per coordinate
uniform   add U(-0.25 s rms, 0.25 s rms) per coordinate
scale     multiply by (1 - 0.1 s)
mask      zero ceil(0.05 s d) randomly chosen coordinates per row
shift     add 0.2 s rms sqrt(d) times a fixed random unit vector
========  =====================================================
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .datamodel import Dataset, EvalSuite
from .errors import InvariantError

CORRUPTION_FAMILIES = ("gauss", "uniform", "scale", "mask", "shift")
ANOMALY_KINDS = ("far_shell", "uniform_cube", "blob")

GAUSS_STEP = 0.15
UNIFORM_STEP = 0.25
SCALE_STEP = 0.1
MASK_STEP = 0.05
SHIFT_STEP = 0.2


@dataclass(frozen=True)
class SynthSpec:
    input_dim: int = 32
    num_classes: int = 4
    trunk_widths: tuple = (5,)
    n_train: int = 600
    n_test: int = 2000
    shift_strength: float = 2.0
    corruption_families: tuple = CORRUPTION_FAMILIES
    severities: int = 5
    seed: int = 0
    latent_dim: int = 6
    n_source: int = 4000
    source_classes: int = 12
    class_sep: float = 2.0
    latent_noise: float = 1.0
    latent_spread: float = 0.2
    input_noise: float = 0.2
    mean_shift: float = 0.5
    ood_noise: float = 0.35
    pretrain_epochs: int = 30
    feature_norm: float | None = 3.0

    def __post_init__(self):
        object.__setattr__(self, "trunk_widths", tuple(int(w) for w in self.trunk_widths))
        object.__setattr__(self, "corruption_families", tuple(self.corruption_families))
        if min(self.input_dim, self.num_classes, self.n_train, self.n_test, self.latent_dim) < 1:
            raise InvariantError("dimensions and sizes must be positive")
        if not self.trunk_widths or min(self.trunk_widths) < 1:
            raise InvariantError("trunk_widths must be nonempty and positive")
        if self.shift_strength < 0:
            raise InvariantError("shift_strength must be nonnegative")
        if self.severities < 1:
            raise InvariantError("severities must be >= 1")
        if 2 * self.latent_dim > self.input_dim:
            raise InvariantError("input_dim must be at least twice latent_dim")
        for fam in self.corruption_families:
            if fam not in CORRUPTION_FAMILIES:
                raise InvariantError(f"unknown corruption family {fam!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_widths"] = list(self.trunk_widths)
        d["corruption_families"] = list(self.corruption_families)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass(frozen=True)
class _Geometry:
    means: np.ndarray          # C x k latent class centers
    source_means: np.ndarray   # S x k latent source-class centers
    U_id: np.ndarray           # d x k
    U_ood: np.ndarray          # d x k
    ood_offset: np.ndarray     # d
    id_std: np.ndarray         # k per-latent-dimension noise std (ID and source)
    ood_std: np.ndarray        # k per-latent-dimension noise std (OOD)


def _geometry(spec: SynthSpec) -> _Geometry:
    rng = np.random.default_rng([spec.seed, 0])
    k, d = spec.latent_dim, spec.input_dim
    Q, _ = np.linalg.qr(rng.standard_normal((d, 2 * k)))
    U_id, V = Q[:, :k], Q[:, k:]
    angle = spec.shift_strength * np.pi / 4
    U_ood = np.cos(angle) * U_id + np.sin(angle) * V
    offset_dir = rng.standard_normal(d)
    offset_dir /= np.linalg.norm(offset_dir)
    means = rng.standard_normal((spec.num_classes, k))
    means *= spec.class_sep / np.linalg.norm(means, axis=1, keepdims=True)
    source_means = rng.standard_normal((spec.source_classes, k))
    source_means *= spec.class_sep / np.linalg.norm(source_means, axis=1, keepdims=True)
    id_std = spec.latent_noise * np.geomspace(spec.latent_spread, 1.0, k)[rng.permutation(k)]
    return _Geometry(
        means=means,
        source_means=source_means,
        U_id=U_id,
        U_ood=U_ood,
        ood_offset=spec.shift_strength * spec.mean_shift * offset_dir,
        id_std=id_std,
        ood_std=np.sqrt(id_std ** 2 + (spec.shift_strength * spec.ood_noise) ** 2),
    )


def balanced_labels(n: int, num_classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % num_classes)


def _sample(means, labels, U, offset, std, spec, rng):
    latent = means[labels] + std * rng.standard_normal((labels.size, spec.latent_dim))
    x = latent @ U.T + offset + spec.input_noise * rng.standard_normal((labels.size, spec.input_dim))
    return x


def _anomalies(kind, n, spec, typical_norm, rng):
    d = spec.input_dim
    if kind == "far_shell":
        v = rng.standard_normal((n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        radius = 3.0 * typical_norm * (1.0 + 0.1 * rng.standard_normal((n, 1)))
        return v * radius
    if kind == "uniform_cube":
        half = 2.0 * typical_norm / np.sqrt(d)
        return rng.uniform(-half, half, size=(n, d))
    center = rng.standard_normal(d)
    center *= typical_norm / np.linalg.norm(center)
    return center + 0.1 * typical_norm / np.sqrt(d) * rng.standard_normal((n, d))


def generate_task(spec: SynthSpec):
    """Return ``(source, id_train, suite)``; bitwise deterministic given ``spec.seed``."""
    geo = _geometry(spec)
    rng = np.random.default_rng([spec.seed, 1])
    C, zero = spec.num_classes, np.zeros(spec.input_dim)

    src_labels = balanced_labels(spec.n_source, spec.source_classes, rng)
    from_ood = rng.permutation(np.arange(spec.n_source) % 2).astype(bool)
    src_x = np.where(
        from_ood[:, None],
        _sample(geo.source_means, src_labels, geo.U_ood, zero, geo.id_std, spec, rng),
        _sample(geo.source_means, src_labels, geo.U_id, zero, geo.id_std, spec, rng),
    )
    source = Dataset("source", "id_train", src_x, src_labels, spec.source_classes)

    y_train = balanced_labels(spec.n_train, C, rng)
    id_train = Dataset("id_train", "id_train", _sample(geo.means, y_train, geo.U_id, zero, geo.id_std, spec, rng), y_train, C)
    y_test = balanced_labels(spec.n_test, C, rng)
    id_test = Dataset("id_test", "id_test", _sample(geo.means, y_test, geo.U_id, zero, geo.id_std, spec, rng), y_test, C)
    y_ood = balanced_labels(spec.n_test, C, rng)
    ood_test = Dataset(
        "ood_test", "ood_test", _sample(geo.means, y_ood, geo.U_ood, geo.ood_offset, geo.ood_std, spec, rng), y_ood, C
    )

    corrupted = []
    for f, family in enumerate(spec.corruption_families):
        for severity in range(1, spec.severities + 1):
            corrupted.append(corrupt(id_test, family, severity, seed=[spec.seed, 2, f, severity]))

    typical = float(np.linalg.norm(id_test.features, axis=1).mean())
    anomaly_sets = []
    for a, kind in enumerate(ANOMALY_KINDS):
        arng = np.random.default_rng([spec.seed, 3, a])
        anomaly_sets.append(Dataset(kind, "anomaly", _anomalies(kind, spec.n_test, spec, typical, arng), None, 0))

    return source, id_train, EvalSuite(id_test, ood_test, corrupted, anomaly_sets)


def bayes_classifier(spec: SynthSpec, domain: str = "id"):
    """Closed-form Bayes-optimal linear classifier ``(W, b)`` for the ID or OOD domain.

    Each class is Gaussian with mean ``U m_c + offset`` and covariance
    ``U diag(std^2) U^T + input_noise^2 I``. Since ``U`` has orthonormal
    columns the precision restricted to its span is ``U diag(1 / (std^2 +
    input_noise^2)) U^T``, and with equal priors the optimal scores are
    ``a_c . U^T (x - offset) - a_c . m_c / 2`` with ``a_c = m_c / (std^2 + input_noise^2)``.
    """
    geo = _geometry(spec)
    if domain == "id":
        U, offset, std = geo.U_id, np.zeros(spec.input_dim), geo.id_std
    elif domain == "ood":
        U, offset, std = geo.U_ood, geo.ood_offset, geo.ood_std
    else:
        raise ValueError(f"unknown domain {domain!r}")
    a = geo.means / (std ** 2 + spec.input_noise ** 2)
    W = a @ U.T
    b = -0.5 * np.sum(a * geo.means, axis=1) - W @ offset
    return W, b


def corruption_scale(features) -> float:
    return float(np.sqrt(np.mean(np.asarray(features, dtype=np.float64) ** 2)))


def gauss_sigma(severity: int, scale: float) -> float:
    return GAUSS_STEP * severity * scale


def corrupt(dataset: Dataset, family: str, severity: int, seed=0, scale: float | None = None) -> Dataset:
    """Apply a severity-graded corruption; severity 0 is the identity."""
    if family not in CORRUPTION_FAMILIES:
        raise ValueError(f"unknown corruption family {family!r}")
    if int(severity) != severity or severity < 0:
        raise ValueError("severity must be a nonnegative integer")
    x = dataset.features.astype(np.float64)
    n, d = x.shape
    rms = corruption_scale(x) if scale is None else scale
    rng = np.random.default_rng(seed)
    s = severity
    if family == "gauss":
        out = x + gauss_sigma(s, rms) * rng.standard_normal(x.shape)
    elif family == "uniform":
        half = UNIFORM_STEP * s * rms
        out = x + rng.uniform(-half, half, size=x.shape)
    elif family == "scale":
        out = x * (1.0 - SCALE_STEP * s)
    elif family == "mask":
        count = min(d, int(np.ceil(round(MASK_STEP * s * d, 9))))
        keys = rng.random((n, d))
        cols = np.argsort(keys, axis=1)[:, :count]
        out = x.copy()
        np.put_along_axis(out, cols, 0.0, axis=1)
    else:
        direction = np.random.default_rng(0).standard_normal(d)
        direction /= np.linalg.norm(direction)
        out = x + SHIFT_STEP * s * rms * np.sqrt(d) * direction
    if s == 0:
        out = x
    return Dataset(
        name=f"{dataset.name}-{family}-{s}" if s else dataset.name,
        role="corrupted" if s else dataset.role,
        features=out,
        labels=dataset.labels,
        num_classes=dataset.num_classes,
        corruption=(family, s) if s else dataset.corruption,
    )


def pretrain_trunk(source: Dataset, trunk_widths, epochs: int = 30, seed=0,
                   activation: str = "relu", learning_rate: float = 0.05,
                   feature_norm: float | None = 3.0) -> nn.MLP:
    """Train trunk plus a throwaway head on ``source``; return the trunk.

    With ``feature_norm`` set, the last trunk layer is rescaled so the mean
    feature norm over ``source`` equals it. Parameters are rounded to float32
    so the in-memory trunk equals its checkpoint.
    """
    from .protocols import AdaptedModel, StageConfig, run_ft

    widths = [source.dim, *trunk_widths]
    trunk = nn.init_params(widths, activation, "uniform", [seed, 10])
    head = nn.init_params([widths[-1], source.num_classes], "identity", "uniform", [seed, 11])
    stage = StageConfig("ft", epochs, nn.OptimConfig(learning_rate=learning_rate))
    model = run_ft(AdaptedModel(trunk, head), source, stage, seed=[seed, 12])
    trunk = model.trunk
    if feature_norm is not None:
        current = np.linalg.norm(model.features(source.features), axis=1).mean()
        W, b = trunk.layers[-1]
        factor = feature_norm / current
        trunk.layers[-1] = (W * factor, b * factor)
    return nn.round_to_f32(trunk)


def build_benchmark(spec: SynthSpec):
    """Generate datasets and the pretrained trunk for ``spec``."""
    source, id_train, suite = generate_task(spec)
    trunk = pretrain_trunk(source, spec.trunk_widths, spec.pretrain_epochs, seed=spec.seed,
                           feature_norm=spec.feature_norm)
    return source, id_train, suite, trunk
