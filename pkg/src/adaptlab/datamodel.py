"""Datasets, evaluation suites, prediction sets and the AEMB embedding format.

AEMB layout (little-endian)::

    magic    4 bytes  b"AEMB"
    version  u32      1
    n        u32      rows
    d        u32      feature dimension
    C        u32      number of classes (0 for anomaly files)
    features n*d f32  row-major
    labels   n   u32  omitted when C == 0
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDatasetError, FormatError, InvariantError, ShapeError

ROLES = ("id_train", "id_test", "ood_test", "anomaly", "corrupted")

AEMB_MAGIC = b"AEMB"
AEMB_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True, eq=False)
class Dataset:
    """A labeled (or, for anomaly sets, unlabeled) embedding matrix.

    Features are stored as float32, the precision of the on-disk format, so
    that writing and re-reading a dataset is lossless.
    """

    name: str
    role: str
    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    corruption: tuple[str, int] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvariantError(f"unknown role {self.role!r}")
        feats = np.array(self.features, dtype=np.float32, copy=True)
        if feats.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise InvariantError("features contain non-finite values")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

        if self.role == "anomaly":
            if self.labels is not None:
                raise InvariantError("anomaly datasets carry no labels")
        else:
            if self.labels is None:
                raise InvariantError(f"{self.role} dataset requires labels")
            labels = np.array(self.labels, dtype=np.int64, copy=True)
            if labels.shape != (feats.shape[0],):
                raise ShapeError(
                    f"labels shape {labels.shape} does not match n={feats.shape[0]}"
                )
            if self.num_classes < 1:
                raise InvariantError("labeled datasets need num_classes >= 1")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise InvariantError("label out of range")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

        if self.role == "corrupted":
            if self.corruption is None:
                raise InvariantError("corrupted datasets need a (family, severity) pair")
            family, severity = self.corruption
            object.__setattr__(self, "corruption", (str(family), int(severity)))
        elif self.corruption is not None:
            raise InvariantError(f"{self.role} dataset must not carry a corruption tag")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise InvariantError(f"dataset {self.name!r} ({self.role}) has no labels")
        return self.labels

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            name=name or self.name,
            role=self.role,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            num_classes=self.num_classes,
            corruption=self.corruption,
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(
            name=self.name,
            role=self.role,
            features=self.features,
            labels=self.labels,
            num_classes=self.num_classes,
            corruption=self.corruption,
        )
        fields.update(changes)
        return Dataset(**fields)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if (self.name, self.role, self.num_classes, self.corruption) != (
            other.name,
            other.role,
            other.num_classes,
            other.corruption,
        ):
            return False
        if self.features.shape != other.features.shape:
            return False
        if not np.array_equal(self.features, other.features):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class EvalSuite:
    id_test: Dataset
    ood_test: Dataset
    corrupted: list[Dataset] = field(default_factory=list)
    anomaly_sets: list[Dataset] = field(default_factory=list)

    def __post_init__(self):
        members = [self.id_test, self.ood_test, *self.corrupted, *self.anomaly_sets]
        dims = {ds.dim for ds in members}
        if len(dims) != 1:
            raise ShapeError(f"suite members disagree on feature dimension: {sorted(dims)}")
        classes = {ds.num_classes for ds in (self.id_test, self.ood_test, *self.corrupted)}
        if len(classes) != 1:
            raise InvariantError(f"suite members disagree on num_classes: {sorted(classes)}")
        for ds in self.corrupted:
            if ds.role != "corrupted":
                raise InvariantError(f"{ds.name} is not a corrupted dataset")
        for ds in self.anomaly_sets:
            if ds.role != "anomaly":
                raise InvariantError(f"{ds.name} is not an anomaly dataset")

    @property
    def dim(self) -> int:
        return self.id_test.dim

    @property
    def num_classes(self) -> int:
        return self.id_test.num_classes


@dataclass(frozen=True, eq=False)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ShapeError(f"probs must be 2-D, got shape {probs.shape}")
        if not np.all(np.isfinite(probs)) or probs.min(initial=0.0) < 0 or probs.max(initial=0.0) > 1:
            raise InvariantError("probabilities must lie in [0, 1]")
        if probs.shape[0] and np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-6:
            raise InvariantError("probability rows must sum to 1")
        object.__setattr__(self, "probs", probs)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (probs.shape[0],):
                raise ShapeError("labels do not match number of prediction rows")
            object.__setattr__(self, "labels", labels)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predicted(self) -> np.ndarray:
        # np.argmax returns the first maximal index, i.e. ties go to the lowest class
        return self.probs.argmax(axis=1)


# ---------------------------------------------------------------------------
# AEMB file format


def write_embedding_file(dataset: Dataset, path) -> None:
    """Write ``dataset`` in AEMB layout.

    Output is a pure function of the dataset contents, so identical datasets
    produce byte-identical files.
    """
    if not isinstance(dataset, Dataset):
        raise TypeError("write_embedding_file expects a Dataset")
    # Dataset construction already enforces invariants; re-check finiteness so a
    # mutated array cannot slip through.
    if not np.all(np.isfinite(dataset.features)):
        raise InvariantError("features contain non-finite values")
    n, d = dataset.features.shape
    C = 0 if dataset.role == "anomaly" else dataset.num_classes
    payload = [
        _HEADER.pack(AEMB_MAGIC, AEMB_VERSION, n, d, C),
        np.ascontiguousarray(dataset.features, dtype="<f4").tobytes(),
    ]
    if C:
        payload.append(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(payload))


def read_embedding_file(
    path,
    role: str | None = None,
    name: str | None = None,
    corruption: tuple[str, int] | None = None,
) -> Dataset:
    """Read an AEMB file.

    The format stores no role or name; ``role`` defaults to ``"anomaly"`` for
    files with C = 0 and ``"id_test"`` otherwise, ``name`` to the file stem.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated payload (header needs {_HEADER.size} bytes)")
    magic, version, n, d, C = _HEADER.unpack_from(raw, 0)
    if magic != AEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != AEMB_VERSION:
        raise FormatError(f"{path}: bad version {version}")
    if n == 0:
        raise EmptyDatasetError(f"{path}: file declares n=0")
    expected = _HEADER.size + 4 * n * d + (4 * n if C else 0)
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after payload")

    offset = _HEADER.size
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    if not np.all(np.isfinite(features)):
        raise FormatError(f"{path}: non-finite feature value")
    labels = None
    if C:
        labels = np.frombuffer(raw, dtype="<u4", count=n, offset=offset + 4 * n * d)
        if labels.max() >= C:
            raise FormatError(f"{path}: label out of range (C={C})")
        labels = labels.astype(np.int64)

    if role is None:
        role = "anomaly" if C == 0 else "id_test"
    if (role == "anomaly") != (C == 0):
        raise FormatError(f"{path}: C={C} is inconsistent with role {role!r}")
    return Dataset(
        name=name if name is not None else path.stem,
        role=role,
        features=features,
        labels=labels,
        num_classes=C,
        corruption=corruption,
    )


# ---------------------------------------------------------------------------
# Splitting


def _second_part_size(n: int, fraction: float) -> int:
    # round before flooring so that e.g. (1 - 0.9) * 10 counts as 1, not 0
    return int(np.floor(round((1.0 - fraction) * n, 9)))


def split_indices(dataset: Dataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified index split; see :func:`split_dataset`."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = dataset.n
    if n < 2:
        raise ValueError("split_dataset needs at least 2 rows")
    n_second = _second_part_size(n, fraction)
    if n_second == 0 or n_second == n:
        raise ValueError(f"fraction {fraction} leaves an empty part for n={n}")

    rng = np.random.default_rng(seed)
    if dataset.labels is None:
        perm = rng.permutation(n)
        second = np.sort(perm[:n_second])
        first = np.sort(perm[n_second:])
        return first, second

    classes, counts = np.unique(dataset.labels, return_counts=True)
    # largest-remainder apportionment of the second part across classes
    exact = n_second * counts / n
    quota = np.floor(exact).astype(int)
    leftover = n_second - quota.sum()
    order = np.lexsort((classes, -(exact - quota)))
    quota[order[:leftover]] += 1

    first, second = [], []
    for cls, q in zip(classes, quota):
        members = np.flatnonzero(dataset.labels == cls)
        members = members[rng.permutation(members.size)]
        second.append(members[:q])
        first.append(members[q:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split_dataset(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split into two disjoint, class-stratified parts.

    The first part receives ``fraction`` of the rows; the second part gets
    ``floor((1 - fraction) * n)`` rows, so rounding remainders land in the
    first part.
    """
    first, second = split_indices(dataset, fraction, seed)
    return (
        dataset.subset(first, name=f"{dataset.name}-a"),
        dataset.subset(second, name=f"{dataset.name}-b"),
    )


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def ensure_parent(path) -> Path:
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    return path
