"""Experiment configuration: a single JSON document.

Top-level keys::

    dataset   {"synth": {...SynthSpec fields...}}
              or {"files": {"id_train": path, "id_test": path, "ood_test": path,
                            "corrupted": [{"path", "family", "severity"}, ...],
                            "anomaly": [{"path", "name"}, ...], "trunk": path}}
    protocols list of names, or {"name", "label"?, "lp"?, "ft"?, "vat"?} objects
    seeds     list of integers
    metrics   {"bins": 15, "anomaly_sets": null | [names]}
    output    {"dir": ..., "csv": ..., "report": ...}

Optional keys: ``preset`` (name of a built-in preset, default ``desk``) and
``grid`` (learning-rate search, see :mod:`adaptlab.harness.runner`).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .. import nn
from ..errors import ConfigError
from ..protocols import Preset, get_preset, parse_protocol
from ..synth import SynthSpec
from ..vat import VatConfig

REQUIRED_KEYS = ("dataset", "protocols", "seeds", "metrics", "output")
OPTIONAL_KEYS = ("preset", "grid")
STAGE_KEYS = ("epochs", "learning_rate", "momentum", "batch_size")
GRID_KEYS = ("lp_learning_rate", "ft_learning_rate", "val_fraction")
FILE_KEYS = ("id_train", "id_test", "ood_test", "corrupted", "anomaly", "trunk")

DEFAULT_CONFIG = {
    "dataset": {"synth": {}},
    "protocols": ["lp", "ft", "lp+ft", "(lp+vat)+(ft+mixup)"],
    "seeds": [0, 1, 2],
    "metrics": {"bins": 15, "anomaly_sets": None},
    "output": {"dir": "results", "csv": "results.csv", "report": "report.md"},
}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


@dataclass(frozen=True)
class ProtocolEntry:
    name: str
    label: str
    overrides: dict = field(default_factory=dict, hash=False, compare=False)
    raw: object = None

    def preset(self, base: Preset) -> Preset:
        lp, ft, vat = base.lp, base.ft, base.vat
        if "lp" in self.overrides:
            lp = _override_stage(lp, self.overrides["lp"])
        if "ft" in self.overrides:
            ft = _override_stage(ft, self.overrides["ft"])
        if "vat" in self.overrides:
            vat = VatConfig(**{**vat.to_dict(), **self.overrides["vat"]})
        return Preset(lp=lp, ft=ft, vat=vat)


def _override_stage(stage, changes: dict):
    unknown = set(changes) - set(STAGE_KEYS)
    if unknown:
        raise ConfigError(f"unknown stage override keys: {sorted(unknown)}")
    optim = stage.optim
    optim = nn.OptimConfig(
        learning_rate=changes.get("learning_rate", optim.learning_rate),
        momentum=changes.get("momentum", optim.momentum),
        batch_size=changes.get("batch_size", optim.batch_size),
    )
    return replace(stage, epochs=int(changes.get("epochs", stage.epochs)), optim=optim)


@dataclass
class ExperimentConfig:
    dataset: dict
    protocols: list
    seeds: list
    bins: int = 15
    anomaly_sets: list | None = None
    output: dict = field(default_factory=dict)
    preset_name: str = "desk"
    grid: dict | None = None
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict = field(default_factory=dict)

    @property
    def synth_spec(self) -> SynthSpec | None:
        if "synth" not in self.dataset:
            return None
        return SynthSpec.from_dict(self.dataset["synth"])

    @property
    def base_preset(self) -> Preset:
        return get_preset(self.preset_name)

    def cell_hash(self, entry: ProtocolEntry) -> str:
        """Digest of everything that determines one protocol's results.

        Seeds, the protocol list and output paths are left out so that adding
        seeds or protocols, or moving the output, keeps existing rows valid.
        """
        body = {
            "dataset": self.raw["dataset"],
            "metrics": self.raw["metrics"],
            "preset": self.preset_name,
            "grid": self.grid,
            "protocol": entry.raw,
        }
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()[:16]

    def output_path(self, key: str) -> Path:
        out = self.output
        return self.base_dir / out.get("dir", ".") / out[key]


def _protocol_entry(item) -> ProtocolEntry:
    if isinstance(item, str):
        parse_protocol(item)
        return ProtocolEntry(item, item, {}, item)
    if not isinstance(item, dict) or "name" not in item:
        raise ConfigError(f"protocol entries are names or objects with a 'name': {item!r}")
    unknown = set(item) - {"name", "label", "lp", "ft", "vat"}
    if unknown:
        raise ConfigError(f"unknown protocol keys: {sorted(unknown)}")
    overrides = {k: dict(item[k]) for k in ("lp", "ft", "vat") if k in item}
    entry = ProtocolEntry(item["name"], item.get("label", item["name"]), overrides, item)
    parse_protocol(entry.name, entry.preset(get_preset("desk")))
    return entry


def _check_grid(grid):
    if grid is None:
        return None
    if not isinstance(grid, dict):
        raise ConfigError("grid must be an object")
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    for key in ("lp_learning_rate", "ft_learning_rate"):
        values = grid.get(key)
        if values is not None and (not isinstance(values, list) or not values or min(values) <= 0):
            raise ConfigError(f"grid.{key} must be a nonempty list of positive rates")
    frac = grid.get("val_fraction", 0.2)
    if not 0 < frac < 1:
        raise ConfigError("grid.val_fraction must lie in (0, 1)")
    return dict(grid)


def parse_config(raw: dict, base_dir=None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"config is missing keys: {missing}")
    unknown = set(raw) - set(REQUIRED_KEYS) - set(OPTIONAL_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    dataset = raw["dataset"]
    if not isinstance(dataset, dict) or len(dataset) != 1 or next(iter(dataset)) not in ("synth", "files"):
        raise ConfigError("dataset must hold exactly one of 'synth' or 'files'")
    if "synth" in dataset:
        try:
            SynthSpec.from_dict(dataset["synth"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid synth spec: {exc}") from exc
    else:
        files = dataset["files"]
        missing = [k for k in FILE_KEYS if k not in files]
        if missing:
            raise ConfigError(f"dataset.files is missing {missing}")

    protocols = raw["protocols"]
    if not isinstance(protocols, list) or not protocols:
        raise ConfigError("at least one protocol is required")
    try:
        entries = [_protocol_entry(p) for p in protocols]
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid protocol entry: {exc}") from exc
    labels = [e.label for e in entries]
    if len(set(labels)) != len(labels):
        raise ConfigError("protocol labels must be unique")

    seeds = raw["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")

    metrics = raw["metrics"]
    if not isinstance(metrics, dict):
        raise ConfigError("metrics must be an object")
    bins = metrics.get("bins", 15)
    if not isinstance(bins, int) or bins < 1:
        raise ConfigError("metrics.bins must be a positive integer")
    sets = metrics.get("anomaly_sets")
    if sets is not None and (not isinstance(sets, list) or not sets):
        raise ConfigError("metrics.anomaly_sets must be null or a nonempty list")

    output = raw["output"]
    if not isinstance(output, dict):
        raise ConfigError("output must be an object")

    preset_name = raw.get("preset", "desk")
    get_preset(preset_name)
    return ExperimentConfig(
        dataset=dataset,
        protocols=entries,
        seeds=list(seeds),
        bins=bins,
        anomaly_sets=sets,
        output={"dir": ".", "csv": "results.csv", "report": "report.md", **output},
        preset_name=preset_name,
        grid=_check_grid(raw.get("grid")),
        base_dir=Path(base_dir) if base_dir is not None else Path.cwd(),
        raw=raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw, base_dir=path.parent)


def default_config() -> ExperimentConfig:
    return parse_config(json.loads(json.dumps(DEFAULT_CONFIG)))
