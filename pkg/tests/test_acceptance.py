"""Acceptance criteria 1-7, each at its stated tolerance.

Every test records one ``PASS``/``FAIL criterion N: ...`` line; the lines are
printed together in the pytest terminal summary.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from adaptlab import nn
from adaptlab.augment import AugmentPolicy
from adaptlab.datamodel import PredictionSet
from adaptlab.harness import cli
from adaptlab.harness.config import DEFAULT_CONFIG, parse_config
from adaptlab.harness.gradcheck import THRESHOLD, run_battery
from adaptlab.harness.runner import cmd_run, read_results
from adaptlab.metrics import auroc, evaluate_all, mean_corruption_accuracy, rms_calibration_error
from adaptlab.protocols import ProtocolSpec, StageConfig, new_model, parse_protocol, run_protocol
from adaptlab.synth import SynthSpec, build_benchmark
from adaptlab.vat import VatConfig, epsilon_abs, vat_direction

from conftest import ACCEPTANCE_LINES

GOLDEN = Path(__file__).parent / "golden"
REGEN = os.environ.get("ADAPTLAB_REGEN_GOLDEN") == "1"


def verdict(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- 1. gradient correctness ---------------------------------------------------------------

def test_criterion_1_gradcheck():
    start = time.perf_counter()
    results = run_battery(instances=20, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_err for r in results)
    kinds = {r.loss for r in results}
    ok = (all(r.passed for r in results) and elapsed < 10.0
          and kinds == {"cross_entropy", "soft_cross_entropy", "kl_to_reference", "vat_objective"}
          and all(r.instances >= 20 for r in results))
    verdict(1, ok, f"gradcheck {len(results)} checks, max rel err {worst:.2e} < {THRESHOLD:g}, {elapsed:.2f}s < 10s")


# --- 2. metric oracles -----------------------------------------------------------------------

def _pair_count_auroc(a, b):
    total = 0.0
    for x in a:
        for y in b:
            total += 1.0 if x > y else 0.5 if x == y else 0.0
    return total / (len(a) * len(b))


def _binary(conf, labels):
    conf = np.asarray(conf, float)
    return PredictionSet(np.c_[conf, 1 - conf], np.asarray(labels))


def test_criterion_2_metric_oracles():
    rng = np.random.default_rng(2)
    auroc_err = 0.0
    for _ in range(200):
        n, m = rng.integers(1, 51, 2)
        a, b = rng.integers(0, 10, n) / 3, rng.integers(0, 10, m) / 3
        auroc_err = max(auroc_err, abs(auroc(a, b) - _pair_count_auroc(a, b)))

    calib = [
        (rms_calibration_error(_binary([1.0] * 4, [0] * 4), bins=2), 0.0),
        (rms_calibration_error(_binary([1.0] * 4, [0, 1, 0, 1]), bins=2), 0.5),
        (rms_calibration_error(_binary([0.6, 0.6, 0.9, 0.9], [0, 1, 0, 0]), bins=2), 0.1),
    ]
    calib_err = max(abs(got - want) for got, want in calib)

    mca_err = 0.0
    for _ in range(50):
        cells, accs = {}, []
        for fam in range(rng.integers(1, 6)):
            for sev in range(1, rng.integers(2, 6)):
                labels = rng.integers(0, 3, rng.integers(5, 40))
                probs = rng.dirichlet(np.ones(3), labels.size)
                cells[(f"f{fam}", sev)] = PredictionSet(probs, labels)
                accs.append(np.mean(probs.argmax(1) == labels))
        mca_err = max(mca_err, abs(mean_corruption_accuracy(cells) - sum(accs) / len(accs)))

    ok = auroc_err <= 1e-12 and calib_err <= 1e-10 and mca_err <= 1e-12
    verdict(2, ok, f"AUROC vs pair count {auroc_err:.1e} (200 inst), RMS calib {calib_err:.1e}, mCA {mca_err:.1e}")


# --- 3. VAT direction ------------------------------------------------------------------------

def test_criterion_3_vat_direction():
    start = time.perf_counter()
    angles = np.arange(3600) * 2 * np.pi / 3600
    D = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    worst = 1.0
    for seed in range(12):
        # two-class heads with the default single iteration, three-class heads with K=10
        C = 2 if seed % 2 == 0 else 3
        config = VatConfig() if C == 2 else VatConfig(power_iters=10)
        rng = np.random.default_rng(seed)
        W, b = rng.standard_normal((C, 2)) * 2, rng.standard_normal(C)
        head = nn.MLP([(W, b)], "identity")
        z = rng.standard_normal((1, 2))
        eps = epsilon_abs(z, config)
        p = nn.softmax(z @ W.T + b)
        q = nn.softmax((z + eps * D) @ W.T + b)
        best = D[np.argmax((p * (np.log(p) - np.log(q))).sum(axis=1))]
        d = vat_direction(head, z, config, seed=[seed, 7])[0]
        worst = min(worst, abs(float(d @ best)))
    elapsed = time.perf_counter() - start
    verdict(3, worst > 0.99 and elapsed < 5.0, f"min |cos| {worst:.5f} > 0.99 over 12 instances, {elapsed:.2f}s < 5s")


# --- 4. protocol contracts --------------------------------------------------------------------

def _toy():
    from adaptlab.datamodel import Dataset

    rng = np.random.default_rng(4)
    y = np.arange(80) % 3
    means = rng.standard_normal((3, 6)) * 2
    return Dataset("toy", "id_train", means[y] + rng.standard_normal((80, 6)), y, 3)


def _toy_model():
    return new_model(nn.init_params([6, 8, 4], "relu", seed=[4, 5]), 3, seed=4)


def _stage(kind, **kw):
    return StageConfig(kind, 3, nn.OptimConfig(0.05, batch_size=16), **kw)


def test_criterion_4_protocol_contracts():
    data, checks = _toy(), {}

    model = _toy_model()
    out, _ = run_protocol(parse_protocol("lp+vat", seed=1), model, data)
    checks["lp frozen"] = out.trunk.flat().tobytes() == model.trunk.flat().tobytes()

    _, log = run_protocol(parse_protocol("(lp+vat)+(ft+mixup)", seed=1), _toy_model(), data)
    checks["hand-off"] = log.stages[1].head_start.equals(log.stages[0].head_end)
    checks["placement"] = (log.stages[0].vat_applications == log.stages[0].steps > 0
                           and log.stages[1].vat_applications == 0
                           and log.stages[0].augment_counts["mixup"] == 0
                           and log.stages[1].augment_counts["mixup"] > 0)

    plain = ProtocolSpec("lp+ft", [_stage("lp"), _stage("ft")], seed=3)
    hardened = ProtocolSpec("(lp+vat)+(ft+mixup)", [
        _stage("lp", vat=VatConfig(alpha=0.0)),
        _stage("ft", augment=(AugmentPolicy("mixup", apply_probability=0.0),)),
    ], seed=3)
    a, _ = run_protocol(plain, _toy_model(), data)
    b, _ = run_protocol(hardened, _toy_model(), data)
    checks["reduction"] = a.trunk.equals(b.trunk) and a.head.equals(b.head)

    failed = [k for k, v in checks.items() if not v]
    verdict(4, not failed, "LP trunk bitwise frozen, exact head hand-off, placement counters, alpha/p=0 reduction"
            + (f" (failed: {failed})" if failed else ""))


# --- 5. determinism and restartability -----------------------------------------------------------

SMALL = {"n_source": 400, "pretrain_epochs": 3, "n_train": 120, "n_test": 150,
         "corruption_families": ["gauss", "mask"], "severities": 2}


def _metrics_only(path):
    # wall-clock time is the one column that legitimately differs between runs
    return [(r.protocol, r.seed, r.mca, r.rmse, r.auroc_mean, r.id_acc, r.ood_acc, r.config_hash)
            for r in read_results(path)]


def test_criterion_5_determinism_and_restart(tmp_path):
    fast = {"lp": {"epochs": 10}, "ft": {"epochs": 3}}
    raw = {
        "dataset": {"synth": SMALL},
        "protocols": [{"name": p, **fast} for p in ("lp", "lp+ft", "(lp+vat)+(ft+mixup)")],
        "seeds": [0, 1, 2],
        "metrics": {"bins": 15, "anomaly_sets": None},
        "output": {"dir": ".", "csv": "r.csv", "report": "r.md"},
    }
    cfg = parse_config(raw, tmp_path)
    cmd_run(cfg, tmp_path / "a.csv")
    cmd_run(cfg, tmp_path / "b.csv")
    cmd_run(cfg, tmp_path / "c.csv", max_cells=4)
    interrupted = len(read_results(tmp_path / "c.csv"))
    cmd_run(cfg, tmp_path / "c.csv")
    a, b, c = (_metrics_only(tmp_path / f"{k}.csv") for k in "abc")
    ok = len(a) == 9 and a == b and a == c and interrupted == 4
    verdict(5, ok, f"3x3 run: rerun identical={a == b}, resumed after 4/9 cells identical={a == c}")


# --- 6. qualitative trends ------------------------------------------------------------------------

TREND_PROTOCOLS = ("lp", "ft", "lp+ft", "(lp+vat)+(ft+mixup)")


def test_criterion_6_trends():
    start = time.perf_counter()
    res = {name: [] for name in TREND_PROTOCOLS}
    for seed in range(5):
        spec = SynthSpec(seed=seed)
        _, train, suite, trunk = build_benchmark(spec)
        for name in TREND_PROTOCOLS:
            model = new_model(trunk, spec.num_classes, seed=[seed, 99])
            model, _ = run_protocol(parse_protocol(name, "desk", seed=seed), model, train)
            res[name].append(evaluate_all(model, suite))
    elapsed = time.perf_counter() - start
    id_acc = {k: np.array([r.id_acc for r in v]) for k, v in res.items()}
    ood = {k: np.array([r.ood_acc for r in v]) for k, v in res.items()}
    a = int((id_acc["ft"] >= id_acc["lp"]).sum())
    b = int((ood["lp+ft"] >= ood["ft"]).sum())
    c = int((ood["(lp+vat)+(ft+mixup)"] >= ood["lp+ft"]).sum())
    ok = a >= 4 and b >= 4 and c >= 4 and elapsed < 300
    verdict(6, ok, f"(a) FT>=LP ID {a}/5, (b) LP+FT>=FT OOD {b}/5, (c) (LP+vat)+(FT+mixup)>=LP+FT OOD {c}/5, "
            f"{elapsed:.1f}s < 300s")


# --- 7. end-to-end pipeline ------------------------------------------------------------------------

def test_criterion_7_pipeline_golden(tmp_path):
    cfg_path = tmp_path / "default.json"
    cfg_path.write_text(json.dumps(DEFAULT_CONFIG))
    codes = [
        cli.main(["synth", "--config", str(cfg_path), "--out", str(tmp_path / "bench")]),
        cli.main(["run", "--config", str(cfg_path), "--bench", str(tmp_path / "bench"),
                  "--out", str(tmp_path / "results.csv")]),
        cli.main(["report", "--in", str(tmp_path / "results.csv"), "--out", str(tmp_path / "report.md")]),
    ]
    text = (tmp_path / "report.md").read_text()
    golden = GOLDEN / "report.md"
    if REGEN:
        golden.write_text(text)
    header_ok = "| Protocol | mCA | RMSE ↓ | AUROC | ID Acc. | OOD Acc. |" in text
    marks_ok = text.count("**") >= 10 and "<u>" in text
    ok = codes == [0, 0, 0] and header_ok and marks_ok and golden.is_file() and text == golden.read_text()
    verdict(7, ok, f"synth/run/report exit codes {codes}, column order and marks, report matches golden file")
