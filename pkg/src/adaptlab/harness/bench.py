"""Benchmark directories: AEMB datasets, the AMDL trunk and a manifest.

The manifest is tab-separated text, one artifact per line after a ``#``
header: ``role  family/severity  path  n  d  C  seed``. ``-`` marks a field
that does not apply (no corruption; the trunk has no row count).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .. import nn
from ..datamodel import Dataset, EvalSuite, read_embedding_file, write_embedding_file
from ..errors import ConfigError
from ..synth import SynthSpec, build_benchmark

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "# role\tfamily/severity\tpath\tn\td\tC\tseed"


@dataclass
class Benchmark:
    id_train: Dataset
    suite: EvalSuite
    trunk: nn.MLP
    source: Dataset | None = None


def _line(role, corruption, path, n, d, C, seed):
    fs = f"{corruption[0]}/{corruption[1]}" if corruption else "-"
    return "\t".join(str(v) for v in (role, fs, path, n, d, C, seed))


def write_benchmark(spec: SynthSpec, out_dir) -> Path:
    """Generate the benchmark for ``spec`` and write it under ``out_dir``.

    Every file is a pure function of ``spec``, so rerunning overwrites the
    directory byte-identically.
    """
    out = Path(out_dir)
    source, id_train, suite, trunk = build_benchmark(spec)
    entries = [("source", source, "source.aemb"), ("id_train", id_train, "id_train.aemb"),
               ("id_test", suite.id_test, "id_test.aemb"), ("ood_test", suite.ood_test, "ood_test.aemb")]
    for ds in suite.corrupted:
        fam, sev = ds.corruption
        entries.append(("corrupted", ds, f"corrupted/{fam}_{sev}.aemb"))
    for ds in suite.anomaly_sets:
        entries.append(("anomaly", ds, f"anomaly/{ds.name}.aemb"))

    lines = [MANIFEST_HEADER]
    try:
        (out / "corrupted").mkdir(parents=True, exist_ok=True)
        (out / "anomaly").mkdir(parents=True, exist_ok=True)
        for role, ds, rel in entries:
            write_embedding_file(ds, out / rel)
            C = ds.num_classes if role != "anomaly" else 0
            lines.append(_line(role, ds.corruption, rel, ds.n, ds.dim, C, spec.seed))
        nn.save_model(trunk, out / "trunk.amdl")
        lines.append(_line("trunk", None, "trunk.amdl", "-", trunk.in_dim, trunk.out_dim, spec.seed))
        (out / MANIFEST).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"writing benchmark to {out}: {exc}") from exc
    return out


def read_manifest(bench_dir) -> list[dict]:
    path = Path(bench_dir) / MANIFEST
    if not path.is_file():
        raise ConfigError(f"no manifest at {path}")
    rows = []
    for raw in path.read_text().splitlines():
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 7:
            raise ConfigError(f"{path}: malformed manifest line {raw!r}")
        role, fs, rel, n, d, C, seed = parts
        corruption = None
        if fs != "-":
            fam, sev = fs.split("/")
            corruption = (fam, int(sev))
        rows.append({"role": role, "corruption": corruption, "path": rel, "n": n, "d": d, "C": C, "seed": seed})
    return rows


def _check_exists(paths):
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"missing benchmark assets: {missing}")


def load_benchmark(bench_dir, anomaly_sets=None) -> Benchmark:
    """Load a directory written by :func:`write_benchmark`."""
    bench_dir = Path(bench_dir)
    rows = read_manifest(bench_dir)
    _check_exists(bench_dir / r["path"] for r in rows)
    by_role = {}
    for r in rows:
        by_role.setdefault(r["role"], []).append(r)
    for role in ("id_train", "id_test", "ood_test", "corrupted", "anomaly", "trunk"):
        if role not in by_role:
            raise ConfigError(f"{bench_dir}: manifest lists no {role} artifact")
    files = {
        "id_train": by_role["id_train"][0]["path"],
        "id_test": by_role["id_test"][0]["path"],
        "ood_test": by_role["ood_test"][0]["path"],
        "corrupted": [{"path": r["path"], "family": r["corruption"][0], "severity": r["corruption"][1]}
                      for r in by_role["corrupted"]],
        "anomaly": [{"path": r["path"], "name": Path(r["path"]).stem} for r in by_role["anomaly"]],
        "trunk": by_role["trunk"][0]["path"],
    }
    return load_files(files, bench_dir, anomaly_sets)


def load_files(files: dict, base_dir=".", anomaly_sets=None) -> Benchmark:
    """Load a benchmark from explicit paths (relative to ``base_dir``)."""
    base = Path(base_dir)
    anomaly = files["anomaly"]
    if anomaly_sets is not None:
        known = {a["name"] for a in anomaly}
        unknown = set(anomaly_sets) - known
        if unknown:
            raise ConfigError(f"unknown anomaly sets {sorted(unknown)}; available {sorted(known)}")
        anomaly = [a for a in anomaly if a["name"] in anomaly_sets]
    paths = [files["id_train"], files["id_test"], files["ood_test"], files["trunk"]]
    paths += [c["path"] for c in files["corrupted"]] + [a["path"] for a in anomaly]
    _check_exists(base / p for p in paths)

    id_train = read_embedding_file(base / files["id_train"], role="id_train", name="id_train")
    id_test = read_embedding_file(base / files["id_test"], role="id_test", name="id_test")
    ood_test = read_embedding_file(base / files["ood_test"], role="ood_test", name="ood_test")
    corrupted = [
        read_embedding_file(base / c["path"], role="corrupted", name=f"id_test-{c['family']}-{c['severity']}",
                            corruption=(c["family"], int(c["severity"])))
        for c in files["corrupted"]
    ]
    anomalies = [read_embedding_file(base / a["path"], role="anomaly", name=a["name"]) for a in anomaly]
    trunk = nn.load_model(base / files["trunk"])
    return Benchmark(id_train, EvalSuite(id_test, ood_test, corrupted, anomalies), trunk)


def benchmark_from_spec(spec: SynthSpec, anomaly_sets=None) -> Benchmark:
    """In-memory equivalent of writing and re-loading the benchmark for ``spec``."""
    source, id_train, suite, trunk = build_benchmark(spec)
    anomalies = suite.anomaly_sets
    if anomaly_sets is not None:
        unknown = set(anomaly_sets) - {a.name for a in anomalies}
        if unknown:
            raise ConfigError(f"unknown anomaly sets {sorted(unknown)}")
        anomalies = [a for a in anomalies if a.name in anomaly_sets]
    suite = EvalSuite(suite.id_test, suite.ood_test, suite.corrupted, anomalies)
    return Benchmark(id_train, suite, trunk, source)
