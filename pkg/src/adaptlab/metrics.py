"""Accuracy, corruption robustness, calibration and anomaly-detection metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .datamodel import EvalSuite, PredictionSet
from .errors import ShapeError

DEFAULT_BINS = 15
COLUMNS = ("mCA", "RMSE", "AUROC", "ID Acc.", "OOD Acc.")


def accuracy(preds: PredictionSet) -> float:
    if preds.labels is None:
        raise ValueError("accuracy needs labels")
    return float(np.mean(preds.predicted == preds.labels))


def mean_corruption_accuracy(per_corruption_preds: dict) -> float:
    """Unweighted mean accuracy over all (family, severity) cells."""
    if not per_corruption_preds:
        raise ValueError("mean_corruption_accuracy needs at least one cell")
    return float(np.mean([accuracy(p) for p in per_corruption_preds.values()]))


def equal_mass_bins(n: int, bins: int) -> list[slice]:
    """Contiguous slices over ``n`` sorted rows; remainder rows go to the earliest bins."""
    base, extra = divmod(n, bins)
    out, start = [], 0
    for b in range(bins):
        size = base + (1 if b < extra else 0)
        if size:
            out.append(slice(start, start + size))
        start += size
    return out


def rms_calibration_error(preds: PredictionSet, bins: int = DEFAULT_BINS) -> float:
    """Root-mean-square gap between confidence and accuracy over equal-mass bins.

    Confidence is the maximum class probability. Rows are sorted by confidence
    and cut into ``bins`` bins of (nearly) equal size; the estimate is
    ``sqrt(sum_b (n_b / n) * (mean_conf_b - acc_b)^2)``.
    """
    if preds.labels is None:
        raise ValueError("rms_calibration_error needs labels")
    if int(bins) != bins or bins < 1:
        raise ValueError("bins must be a positive integer")
    conf = preds.confidence
    correct = (preds.predicted == preds.labels).astype(np.float64)
    order = np.argsort(conf, kind="stable")
    conf, correct = conf[order], correct[order]
    n = conf.shape[0]
    total = 0.0
    for sl in equal_mass_bins(n, bins):
        gap = conf[sl].mean() - correct[sl].mean()
        total += (sl.stop - sl.start) / n * gap * gap
    return float(np.sqrt(total))


def auroc(id_scores, anomaly_scores) -> float:
    """P(ID score > anomaly score) with ties counted one half (Mann-Whitney U / nm)."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(anomaly_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs nonempty score vectors")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[: a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def anomaly_score(preds: PredictionSet) -> np.ndarray:
    """Maximum softmax probability; higher means more in-distribution."""
    return preds.confidence


@dataclass
class MetricsReport:
    id_acc: float
    ood_acc: float
    mca: float
    rmse_calibration: float
    auroc_mean: float
    auroc_per_set: dict = field(default_factory=dict)
    per_corruption_acc: dict = field(default_factory=dict)

    def row(self) -> tuple:
        """Values in table column order: mCA, RMSE, AUROC, ID Acc., OOD Acc."""
        return (self.mca, self.rmse_calibration, self.auroc_mean, self.id_acc, self.ood_acc)

    def to_dict(self) -> dict:
        return {
            "id_acc": self.id_acc,
            "ood_acc": self.ood_acc,
            "mca": self.mca,
            "rmse_calibration": self.rmse_calibration,
            "auroc_mean": self.auroc_mean,
            "auroc_per_set": dict(self.auroc_per_set),
            "per_corruption_acc": {f"{fam}:{sev}": v for (fam, sev), v in self.per_corruption_acc.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        cells = {}
        for key, v in d.get("per_corruption_acc", {}).items():
            fam, sev = key.rsplit(":", 1)
            cells[(fam, int(sev))] = v
        return cls(
            id_acc=d["id_acc"],
            ood_acc=d["ood_acc"],
            mca=d["mca"],
            rmse_calibration=d["rmse_calibration"],
            auroc_mean=d["auroc_mean"],
            auroc_per_set=dict(d.get("auroc_per_set", {})),
            per_corruption_acc=cells,
        )

    def to_markdown(self, name: str = "model") -> str:
        header = "| Protocol | mCA | RMSE ↓ | AUROC | ID Acc. | OOD Acc. |"
        sep = "|---|---:|---:|---:|---:|---:|"
        cells = " | ".join(f"{v:.4f}" for v in self.row())
        return "\n".join([header, sep, f"| {name} | {cells} |"])


def evaluate_all(model, suite: EvalSuite, bins: int = DEFAULT_BINS) -> MetricsReport:
    """Run ``model`` on every member of ``suite`` and fill a :class:`MetricsReport`."""
    if suite.dim != model.trunk.in_dim:
        raise ShapeError(f"suite width {suite.dim} does not match model input {model.trunk.in_dim}")
    if suite.num_classes != model.num_classes:
        raise ShapeError(f"suite has {suite.num_classes} classes, model emits {model.num_classes}")

    def run(ds):
        return model.predict(ds.features, ds.labels)

    id_preds = run(suite.id_test)
    ood_preds = run(suite.ood_test)
    cells = {ds.corruption: run(ds) for ds in suite.corrupted}
    per_cell = {key: accuracy(p) for key, p in cells.items()}
    id_scores = anomaly_score(id_preds)
    per_set = {ds.name: auroc(id_scores, anomaly_score(run(ds))) for ds in suite.anomaly_sets}
    return MetricsReport(
        id_acc=accuracy(id_preds),
        ood_acc=accuracy(ood_preds),
        mca=float(np.mean(list(per_cell.values()))) if per_cell else float("nan"),
        rmse_calibration=rms_calibration_error(id_preds, bins),
        auroc_mean=float(np.mean(list(per_set.values()))) if per_set else float("nan"),
        auroc_per_set=per_set,
        per_corruption_acc=per_cell,
    )
