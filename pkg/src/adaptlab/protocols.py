"""Adaptation protocols: linear probing, fine-tuning and their compositions.

A protocol is an ordered list of stages. Each stage trains either the head
alone (``lp``) or trunk and head together (``ft``), optionally with
augmentations applied to raw inputs and, for ``lp`` stages, VAT on the
penultimate representation. Stages share one model, so the head leaving
stage k is exactly the head entering stage k + 1.

Protocol names follow a small grammar: stages joined by ``+``, each ``lp`` or
``ft`` optionally followed by ``+<augmentation>`` or ``+vat``, with modified
stages parenthesized when there is more than one stage::

    lp    ft+mixup    lp+ft    lp+(ft+cutmix)    (lp+vat)+(ft+augmix-analog)
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .augment import AugmentPolicy, apply_policy, named_policies
from .datamodel import Dataset, PredictionSet, one_hot
from .errors import ConfigError, ShapeError
from .vat import VatConfig, epsilon_abs, lds_loss_and_grad, vat_direction

STAGE_KINDS = ("lp", "ft")


@dataclass(frozen=True)
class StageConfig:
    kind: str
    epochs: int
    optim: nn.OptimConfig
    augment: tuple = ()
    vat: VatConfig | None = None
    augment_names: tuple = ()

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise ConfigError(f"unknown stage kind {self.kind!r}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError("epochs must be a nonnegative integer")
        if self.vat is not None and self.kind != "lp":
            raise ConfigError("vat only permitted when kind = lp")
        object.__setattr__(self, "augment", tuple(self.augment))
        object.__setattr__(self, "augment_names", tuple(self.augment_names))
        for policy in self.augment:
            if not isinstance(policy, AugmentPolicy):
                raise ConfigError(f"stage augment entries must be AugmentPolicy, got {policy!r}")

    @property
    def label(self) -> str:
        mods = list(self.augment_names)
        if self.vat is not None:
            mods.insert(0, "vat")
        return "+".join([self.kind, *mods])


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    stages: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ConfigError("a protocol needs at least one stage")
        for stage in self.stages:
            if not isinstance(stage, StageConfig):
                raise ConfigError(f"invalid stage {stage!r}")


@dataclass
class StageLog:
    kind: str
    label: str
    epochs: int
    epoch_losses: list = field(default_factory=list)
    augment_counts: Counter = field(default_factory=Counter)
    vat_applications: int = 0
    steps: int = 0
    head_start: nn.MLP | None = None
    head_end: nn.MLP | None = None


@dataclass
class TrainLog:
    stages: list = field(default_factory=list)


@dataclass
class AdaptedModel:
    trunk: nn.MLP
    head: nn.MLP
    provenance: TrainLog = field(default_factory=TrainLog)

    def __post_init__(self):
        if len(self.head.layers) != 1:
            raise ShapeError("the head must be a single dense layer")
        if self.trunk.out_dim != self.head.in_dim:
            raise ShapeError(
                f"trunk emits width {self.trunk.out_dim}, head expects {self.head.in_dim}"
            )

    @property
    def num_classes(self) -> int:
        return self.head.out_dim

    def copy(self) -> "AdaptedModel":
        return AdaptedModel(self.trunk.copy(), self.head.copy(), TrainLog(list(self.provenance.stages)))

    def features(self, x) -> np.ndarray:
        return nn.forward_cache(self.trunk, x)[0]

    def logits(self, x) -> np.ndarray:
        return nn.forward_cache(self.head, self.features(x))[0]

    def predict(self, x, labels=None) -> PredictionSet:
        return PredictionSet(nn.softmax(self.logits(x)), labels)


def new_model(trunk: nn.MLP, num_classes: int, seed=0, head_init: str = "uniform") -> AdaptedModel:
    """Attach a freshly initialized linear head to a copy of ``trunk``."""
    head = nn.init_params([trunk.out_dim, num_classes], "identity", head_init, seed)
    return AdaptedModel(trunk.copy(), head)


def stage_seed(seed: int, stage_index: int) -> list:
    """Seed entropy used for stage ``stage_index`` of a protocol run."""
    return [int(seed), int(stage_index)]


# ---------------------------------------------------------------------------
# stage training

_NEEDS_PAIRS = ("mixup", "cutmix_mask")


def _train_stage(model: AdaptedModel, train: Dataset, stage: StageConfig, seed, update_trunk: bool):
    model = model.copy()
    labels = train.require_labels()
    if train.dim != model.trunk.in_dim:
        raise ShapeError(f"dataset width {train.dim} does not match trunk input {model.trunk.in_dim}")
    num_classes = model.num_classes
    log = StageLog(kind=stage.kind, label=stage.label, epochs=stage.epochs, head_start=model.head.copy())

    # independent streams so that turning augmentation/VAT off leaves batch order untouched
    shuffle_ss, aug_ss, vat_ss = np.random.SeedSequence(seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    aug_rng = np.random.default_rng(aug_ss)
    vat_rng = np.random.default_rng(vat_ss)

    x_all = train.features.astype(np.float64)
    n = x_all.shape[0]
    bs = stage.optim.batch_size
    head_state = nn.zero_state(model.head)
    trunk_state = nn.zero_state(model.trunk) if update_trunk else None
    vat_on = stage.vat is not None and stage.vat.alpha > 0

    for _ in range(stage.epochs):
        perm = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            xb = x_all[idx]
            targets = one_hot(labels[idx], num_classes)
            soft = False
            for policy in stage.augment:
                if xb.shape[0] < 2 and policy.kind in _NEEDS_PAIRS:
                    continue
                batch = apply_policy(policy, xb, targets, aug_rng, counter=log.augment_counts)
                xb, targets = batch.features, batch.soft_targets
                soft = soft or batch.used_soft_labels

            z, trunk_cache = nn.forward_cache(model.trunk, xb)
            logits, head_cache = nn.forward_cache(model.head, z)
            if soft:
                loss, dlogits = nn.loss_and_logit_grad(logits, "soft_cross_entropy", targets)
            else:
                loss, dlogits = nn.loss_and_logit_grad(logits, "cross_entropy", targets.argmax(axis=1))
            head_grads, dz = nn.backprop(model.head, head_cache, dlogits, need_input_grad=update_trunk)

            if vat_on:
                directions = vat_direction(model.head, z, stage.vat, vat_rng)
                lds, lds_grads = lds_loss_and_grad(model.head, z, directions, epsilon_abs(z, stage.vat))
                loss += stage.vat.alpha * lds
                head_grads = head_grads + lds_grads.scale(stage.vat.alpha)
                log.vat_applications += 1

            if update_trunk:
                trunk_grads, _ = nn.backprop(model.trunk, trunk_cache, dz)
                nn.sgd_step(model.trunk, trunk_grads, trunk_state, stage.optim)
            nn.sgd_step(model.head, head_grads, head_state, stage.optim)
            total += loss * idx.size
            log.steps += 1
        log.epoch_losses.append(total / n)

    log.head_end = model.head.copy()
    model.provenance.stages.append(log)
    return model


def run_lp(model: AdaptedModel, train: Dataset, stage: StageConfig, seed=0) -> AdaptedModel:
    """Train only the head; the trunk is returned bitwise unchanged."""
    if stage.kind != "lp":
        raise ConfigError(f"run_lp got a {stage.kind!r} stage")
    return _train_stage(model, train, stage, seed, update_trunk=False)


def run_ft(model: AdaptedModel, train: Dataset, stage: StageConfig, seed=0) -> AdaptedModel:
    """Train trunk and head jointly."""
    if stage.kind != "ft":
        raise ConfigError(f"run_ft got a {stage.kind!r} stage")
    if stage.vat is not None:
        raise ConfigError("vat only permitted when kind = lp")
    return _train_stage(model, train, stage, seed, update_trunk=True)


def run_protocol(spec: ProtocolSpec, model: AdaptedModel, train: Dataset):
    """Run every stage of ``spec`` in order on one model.

    Returns ``(model, log)`` where ``log`` holds one :class:`StageLog` per stage.
    """
    if not isinstance(spec, ProtocolSpec):
        raise ConfigError("run_protocol expects a ProtocolSpec")
    current = AdaptedModel(model.trunk.copy(), model.head.copy())
    for k, stage in enumerate(spec.stages):
        runner = run_lp if stage.kind == "lp" else run_ft
        current = runner(current, train, stage, stage_seed(spec.seed, k))
    return current, current.provenance


# ---------------------------------------------------------------------------
# presets and names


@dataclass(frozen=True)
class Preset:
    lp: StageConfig
    ft: StageConfig
    vat: VatConfig


PRESETS = {
    # grid-searched on the default synthetic benchmark
    "desk": Preset(
        lp=StageConfig("lp", 100, nn.OptimConfig(learning_rate=0.5)),
        ft=StageConfig("ft", 20, nn.OptimConfig(learning_rate=0.01)),
        vat=VatConfig(epsilon_rel=0.3),
    ),
    # image-scale hyperparameters: LP 200 epochs at LR 30, FT 20 epochs at LR 1e-5
    "image-scale": Preset(
        lp=StageConfig("lp", 200, nn.OptimConfig(learning_rate=nn.IMAGE_LP_LR)),
        ft=StageConfig("ft", 20, nn.OptimConfig(learning_rate=nn.IMAGE_FT_LR)),
        vat=VatConfig(),
    ),
}


def get_preset(preset) -> Preset:
    if isinstance(preset, Preset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}") from None


def _split_top(text: str) -> list[str]:
    parts, depth, buf = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
            if depth < 0:
                raise ConfigError(f"unbalanced parentheses in {text!r}")
        if ch == "+" and depth == 0:
            parts.append("".join(buf).strip())
            buf = []
        else:
            buf.append(ch)
    if depth != 0:
        raise ConfigError(f"unbalanced parentheses in {text!r}")
    parts.append("".join(buf).strip())
    if any(not p for p in parts):
        raise ConfigError(f"empty component in protocol name {text!r}")
    return parts


def _build_stage(kind: str, modifiers: list[str], preset: Preset) -> StageConfig:
    base = preset.lp if kind == "lp" else preset.ft
    vat = None
    policies, names = [], []
    for mod in modifiers:
        if mod == "vat":
            if kind != "lp":
                raise ConfigError("vat only permitted when kind = lp")
            if vat is not None:
                raise ConfigError("vat listed twice in one stage")
            vat = preset.vat
        else:
            policies.extend(named_policies(mod))
            names.append(mod)
    return replace(base, augment=tuple(policies), vat=vat, augment_names=tuple(names))


def parse_protocol(name: str, preset="desk", seed: int = 0) -> ProtocolSpec:
    """Build a :class:`ProtocolSpec` from a protocol name such as ``(lp+vat)+(ft+mixup)``."""
    preset = get_preset(preset)
    text = name.strip().lower()
    stages = []
    pending = None  # (kind, modifiers, closed)
    for token in _split_top(text):
        if token.startswith("("):
            if not token.endswith(")"):
                raise ConfigError(f"malformed stage {token!r} in {name!r}")
            inner = _split_top(token[1:-1])
            if inner[0] not in STAGE_KINDS or any(t in STAGE_KINDS or t.startswith("(") for t in inner[1:]):
                raise ConfigError(f"a parenthesized stage must hold exactly one lp/ft: {token!r}")
            if pending:
                stages.append(_build_stage(pending[0], pending[1], preset))
            pending = (inner[0], inner[1:], True)
        elif token in STAGE_KINDS:
            if pending:
                stages.append(_build_stage(pending[0], pending[1], preset))
            pending = (token, [], False)
        else:
            if pending is None or pending[2]:
                raise ConfigError(f"modifier {token!r} does not follow an unparenthesized stage in {name!r}")
            pending[1].append(token)
    if pending is None:
        raise ConfigError(f"no stages in protocol name {name!r}")
    stages.append(_build_stage(pending[0], pending[1], preset))
    spec = ProtocolSpec(name=format_protocol_name(stages), stages=tuple(stages), seed=seed)
    return spec


def format_protocol_name(stages) -> str:
    labels = [stage.label for stage in stages]
    if len(labels) == 1:
        return labels[0]
    return "+".join(f"({lab})" if "+" in lab else lab for lab in labels)


DEFAULT_AUGMENTATIONS = ("augmix-analog", "randaug-analog", "cutmix", "mixup")


def canonical_protocols(augmentations=DEFAULT_AUGMENTATIONS, preset="desk", seed: int = 0) -> list[ProtocolSpec]:
    """Every protocol layout from the comparison tables, per augmentation."""
    names = ["lp", "ft", "lp+ft"]
    for aug in augmentations:
        names += [f"lp+{aug}", f"ft+{aug}", f"lp+(ft+{aug})", f"(lp+{aug})+ft"]
    names.append("(lp+vat)+ft")
    names += [f"(lp+vat)+(ft+{aug})" for aug in augmentations]
    return [parse_protocol(name, preset, seed) for name in names]
