"""Markdown tables from a results CSV.

Rows are averaged over seeds per protocol, then split into tables by
protocol family: plain LP/FT compositions, protocols with augmentation, and
protocols with VAT. Ranks are computed over all protocols in the file, so a
bold entry is the best across every table, not only its own; the second best
is underlined and RMSE is lower-is-better. Comparisons use the values as
printed (4 decimals), so entries that look equal rank equal.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..protocols import parse_protocol
from .runner import METRIC_FIELDS, read_results

HEADER = "| Protocol | mCA | RMSE ↓ | AUROC | ID Acc. | OOD Acc. |"
ALIGN = "|---|---:|---:|---:|---:|---:|"
COLUMN_FIELDS = ("mca", "rmse", "auroc_mean", "id_acc", "ood_acc")
LOWER_IS_BETTER = {"rmse"}
DECIMALS = 4
GROUPS = (
    ("base", "LP / FT protocols"),
    ("augment", "Protocols with augmentation"),
    ("vat", "Protocols with virtual adversarial training"),
    ("other", "Other protocols"),
)


def protocol_group(name: str) -> str:
    try:
        spec = parse_protocol(name)
    except ValueError:
        return "other"
    if any(stage.vat is not None for stage in spec.stages):
        return "vat"
    if any(stage.augment_names for stage in spec.stages):
        return "augment"
    return "base"


def mean_rows(rows) -> dict:
    """``{protocol: {field: mean, "seeds": [...]}}`` in first-appearance order."""
    grouped: dict = {}
    for row in rows:
        grouped.setdefault(row.protocol, []).append(row)
    out = {}
    for name, members in grouped.items():
        out[name] = {f: float(np.mean([getattr(r, f) for r in members])) for f in METRIC_FIELDS}
        out[name]["seeds"] = sorted(r.seed for r in members)
    return out


def _marks(values: list[float], lower_better: bool) -> list[str]:
    shown = [round(v, DECIMALS) for v in values]
    ranked = sorted(set(shown), reverse=not lower_better)
    best = ranked[0]
    second = ranked[1] if len(ranked) > 1 else None
    marks = []
    for v in shown:
        marks.append("best" if v == best else "second" if v == second else "")
    return marks


def _cell(value: float, mark: str) -> str:
    text = f"{value:.{DECIMALS}f}"
    if mark == "best":
        return f"**{text}**"
    if mark == "second":
        return f"<u>{text}</u>"
    return text


def column_marks(means: dict) -> dict:
    """``{(protocol, field): "best" | "second" | ""}`` ranked over all protocols."""
    names = list(means)
    marks = {}
    for f in COLUMN_FIELDS:
        ranked = _marks([means[n][f] for n in names], f in LOWER_IS_BETTER)
        marks.update({(n, f): m for n, m in zip(names, ranked)})
    return marks


def render_table(means: dict, marks: dict | None = None) -> str:
    marks = column_marks(means) if marks is None else marks
    lines = [HEADER, ALIGN]
    for name, m in means.items():
        cells = [_cell(m[f], marks[(name, f)]) for f in COLUMN_FIELDS]
        lines.append("| " + " | ".join([name, *cells]) + " |")
    return "\n".join(lines)


def render_report(rows) -> str:
    if not rows:
        raise ValueError("report needs at least one result row")
    means = mean_rows(rows)
    marks = column_marks(means)
    seeds = sorted({s for m in means.values() for s in m["seeds"]})
    parts = ["# Results", "",
             f"Means over seeds {', '.join(str(s) for s in seeds)}. "
             "Best per column across all tables in bold, second best underlined; "
             "RMSE ↓ is lower-is-better.", ""]
    for key, title in GROUPS:
        members = {n: m for n, m in means.items() if protocol_group(n) == key}
        if members:
            parts += [f"## {title}", "", render_table(members, marks), ""]
    return "\n".join(parts)


def cmd_report(in_csv, out_md) -> str:
    path = Path(in_csv)
    if not path.is_file():
        raise ConfigError(f"no results file at {path}")
    rows = read_results(path)
    if not rows:
        raise ConfigError(f"{path} holds no result rows")
    text = render_report(rows)
    out = Path(out_md)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    return text
