"""Execute (protocol, seed) cells and persist one CSV row per cell.

Rows are keyed by (protocol label, seed, config hash). A rerun skips keys
that are already present, so an interrupted run resumes where it stopped.
Every write replaces the whole file through a temporary sibling and
``os.replace``, so readers never observe a half-written row.

With a ``grid`` block in the config, each cell first picks learning rates by
ID accuracy on a held-out split of the training set, then retrains on the
full training set with the chosen rates.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .. import nn
from ..datamodel import split_dataset
from ..errors import ConfigError
from ..metrics import accuracy, evaluate_all
from ..protocols import Preset, new_model, parse_protocol, run_protocol
from .bench import Benchmark, benchmark_from_spec, load_benchmark, load_files
from .config import ExperimentConfig, ProtocolEntry

CSV_HEADER = ("protocol", "seed", "mca", "rmse", "auroc_mean", "id_acc", "ood_acc", "wall_time_s", "config_hash")
METRIC_FIELDS = ("mca", "rmse", "auroc_mean", "id_acc", "ood_acc")


@dataclass(frozen=True)
class ResultRow:
    protocol: str
    seed: int
    mca: float
    rmse: float
    auroc_mean: float
    id_acc: float
    ood_acc: float
    wall_time_s: float
    config_hash: str

    @property
    def key(self):
        return (self.protocol, self.seed, self.config_hash)

    def to_csv(self) -> list[str]:
        metrics = [repr(float(getattr(self, f))) for f in METRIC_FIELDS]
        return [self.protocol, str(self.seed), *metrics, f"{self.wall_time_s:.3f}", self.config_hash]

    @classmethod
    def from_csv(cls, rec: dict) -> "ResultRow":
        return cls(
            protocol=rec["protocol"],
            seed=int(rec["seed"]),
            **{f: float(rec[f]) for f in METRIC_FIELDS},
            wall_time_s=float(rec["wall_time_s"]),
            config_hash=rec["config_hash"],
        )


def cell_seed(base_seed: int, protocol: str) -> int:
    """Mix ``base_seed`` with a stable digest of the protocol label.

    The digest depends only on the label, so adding or reordering protocols
    leaves every other cell's randomness unchanged.
    """
    digest = int.from_bytes(hashlib.sha256(protocol.encode()).digest()[:8], "little")
    return int(np.random.SeedSequence([int(base_seed), digest]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# CSV persistence


def read_results(path) -> list[ResultRow]:
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return [ResultRow.from_csv(rec) for rec in reader]


def write_results(path, rows) -> None:
    """Atomically replace ``path`` with ``rows``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.to_csv())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# cells


def _train_and_eval(entry: ProtocolEntry, preset: Preset, bench: Benchmark, seed: int, bins: int):
    spec = parse_protocol(entry.name, preset, seed=seed)
    model = new_model(bench.trunk, bench.suite.num_classes, seed=[seed, 1])
    model, _ = run_protocol(spec, model, bench.id_train)
    return model, evaluate_all(model, bench.suite, bins)


def _with_rates(preset: Preset, lp_lr, ft_lr) -> Preset:
    lp, ft = preset.lp, preset.ft
    if lp_lr is not None:
        lp = replace(lp, optim=replace(lp.optim, learning_rate=lp_lr))
    if ft_lr is not None:
        ft = replace(ft, optim=replace(ft.optim, learning_rate=ft_lr))
    return Preset(lp=lp, ft=ft, vat=preset.vat)


def select_preset(entry: ProtocolEntry, preset: Preset, bench: Benchmark, seed: int, grid: dict | None) -> Preset:
    """Pick learning rates from ``grid`` by held-out ID accuracy (first best wins)."""
    if not grid:
        return preset
    kinds = {stage.kind for stage in parse_protocol(entry.name, preset).stages}
    lp_rates = grid.get("lp_learning_rate") if "lp" in kinds else None
    ft_rates = grid.get("ft_learning_rate") if "ft" in kinds else None
    candidates = list(itertools.product(lp_rates or [None], ft_rates or [None]))
    if len(candidates) == 1 and candidates[0] == (None, None):
        return preset
    fit, val = split_dataset(bench.id_train, 1.0 - grid.get("val_fraction", 0.2), seed=seed)
    best, best_acc = preset, -1.0
    for lp_lr, ft_lr in candidates:
        trial = _with_rates(preset, lp_lr, ft_lr)
        spec = parse_protocol(entry.name, trial, seed=seed)
        model = new_model(bench.trunk, bench.suite.num_classes, seed=[seed, 1])
        model, _ = run_protocol(spec, model, fit)
        acc = accuracy(model.predict(val.features, val.labels))
        if acc > best_acc:
            best, best_acc = trial, acc
    return best


def run_cell(entry: ProtocolEntry, seed: int, bench: Benchmark, bins: int, base_preset: Preset,
             grid: dict | None, config_hash: str) -> ResultRow:
    start = time.perf_counter()
    cs = cell_seed(seed, entry.label)
    preset = select_preset(entry, entry.preset(base_preset), bench, cs, grid)
    _, report = _train_and_eval(entry, preset, bench, cs, bins)
    return ResultRow(
        protocol=entry.label,
        seed=seed,
        mca=report.mca,
        rmse=report.rmse_calibration,
        auroc_mean=report.auroc_mean,
        id_acc=report.id_acc,
        ood_acc=report.ood_acc,
        wall_time_s=time.perf_counter() - start,
        config_hash=config_hash,
    )


def load_config_benchmark(cfg: ExperimentConfig, bench_dir=None) -> Benchmark:
    if bench_dir is not None:
        return load_benchmark(bench_dir, cfg.anomaly_sets)
    if "files" in cfg.dataset:
        return load_files(cfg.dataset["files"], cfg.base_dir, cfg.anomaly_sets)
    return benchmark_from_spec(cfg.synth_spec, cfg.anomaly_sets)


def plan_cells(cfg: ExperimentConfig) -> list[tuple[ProtocolEntry, int, str]]:
    return [(entry, seed, cfg.cell_hash(entry)) for entry in cfg.protocols for seed in cfg.seeds]


def _ordered(existing: list[ResultRow], done: dict, plan) -> list[ResultRow]:
    # rows outside the plan keep their file order; planned rows follow in plan order
    planned = {(e.label, s, h) for e, s, h in plan}
    rows = [r for r in existing if r.key not in planned]
    rows += [done[(e.label, s, h)] for e, s, h in plan if (e.label, s, h) in done]
    return rows


def cmd_run(cfg: ExperimentConfig, out_csv, bench_dir=None, workers: int = 1, max_cells=None,
            log=None) -> list[ResultRow]:
    """Run every missing cell of ``cfg`` and return the final row list.

    ``max_cells`` stops after that many new cells (used to simulate an
    interruption). Assets are loaded and checked before any training.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    bench = load_config_benchmark(cfg, bench_dir)
    existing = read_results(out_csv)
    done = {r.key: r for r in existing}
    plan = plan_cells(cfg)
    todo = [(e, s, h) for e, s, h in plan if (e.label, s, h) not in done]
    if max_cells is not None:
        todo = todo[: max(0, int(max_cells))]
    base = cfg.base_preset

    def record(row: ResultRow):
        done[row.key] = row
        write_results(out_csv, _ordered(existing, done, plan))
        if log:
            log(f"{row.protocol} seed={row.seed} id={row.id_acc:.4f} ood={row.ood_acc:.4f} ({row.wall_time_s:.1f}s)")

    if workers == 1 or len(todo) <= 1:
        for entry, seed, h in todo:
            record(run_cell(entry, seed, bench, cfg.bins, base, cfg.grid, h))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, e, s, bench, cfg.bins, base, cfg.grid, h) for e, s, h in todo]
            for fut in as_completed(futures):
                record(fut.result())
    if not todo and not Path(out_csv).exists():
        write_results(out_csv, _ordered(existing, done, plan))
    return _ordered(existing, done, plan)
