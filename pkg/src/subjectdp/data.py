"""Subject-tagged datasets, federation layouts and minibatch sampling.

Every data item carries the identifier of the subject it belongs to. A
subject's items may be spread over several federation users; the partitioners
below decide that placement.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DataFormatError(ValueError):
    """Raised for malformed input files or inconsistent dataset contents."""


@dataclass(frozen=True)
class DataItem:
    features: np.ndarray
    label: int
    subject: int


@dataclass(frozen=True, eq=False)
class SubjectDataset:
    """Columnar store of items, each tagged with a subject id.

    Attributes:
      features: float64 array of shape (n, d_in).
      labels: int64 array of shape (n,).
      subjects: int64 array of shape (n,), non-negative subject ids.
      num_classes: number of label classes the items are drawn from.
    """

    features: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    num_classes: int
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        subjects = np.ascontiguousarray(self.subjects, dtype=np.int64)
        if features.ndim != 2:
            raise DataFormatError(f"features must be 2-D, got shape {features.shape}")
        n = features.shape[0]
        if labels.shape != (n,) or subjects.shape != (n,):
            raise DataFormatError("features, labels and subjects must have equal length")
        if self.num_classes < 2:
            raise DataFormatError(f"num_classes must be >= 2, got {self.num_classes}")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataFormatError("labels must lie in [0, num_classes)")
        if n and subjects.min() < 0:
            raise DataFormatError("subject ids must be non-negative")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "subjects", subjects)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __getitem__(self, i: int) -> DataItem:
        return DataItem(self.features[i], int(self.labels[i]), int(self.subjects[i]))

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    @property
    def subject_index(self) -> dict[int, np.ndarray]:
        """Map subject id -> sorted array of item positions."""
        if self._index is None:
            order = np.argsort(self.subjects, kind="stable")
            ids, starts = np.unique(self.subjects[order], return_index=True)
            groups = np.split(order, starts[1:]) if len(order) else []
            object.__setattr__(
                self, "_index", {int(s): g for s, g in zip(ids, groups)}
            )
        return self._index

    def subset(self, positions: Sequence[int]) -> "SubjectDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return SubjectDataset(
            self.features[positions],
            self.labels[positions],
            self.subjects[positions],
            self.num_classes,
        )


@dataclass(frozen=True)
class FederationLayout:
    n_users: int
    user_datasets: list[SubjectDataset]
    subject_ids: np.ndarray

    @property
    def total_subjects(self) -> int:
        return len(self.subject_ids)


@dataclass(frozen=True)
class Minibatch:
    positions: np.ndarray
    q: float

    @property
    def size(self) -> int:
        return len(self.positions)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _parse_count_spec(spec) -> tuple[str, tuple[float, ...]]:
    if isinstance(spec, (int, np.integer)):
        return "const", (float(spec),)
    kind, *args = str(spec).split(":")
    try:
        values = tuple(float(a) for a in args)
    except ValueError:
        raise ValueError(f"bad items_per_subject spec {spec!r}") from None
    arity = {"const": 1, "poisson": 1, "uniform": 2}
    if kind not in arity or len(values) != arity[kind]:
        raise ValueError(
            f"bad items_per_subject spec {spec!r}; expected const:N, poisson:MEAN "
            "or uniform:LO:HI"
        )
    return kind, values


def draw_items_per_subject(spec, n_subjects: int, rng: np.random.Generator) -> np.ndarray:
    """Draws per-subject item counts from a spec string.

    Supported specs are ``const:N``, ``poisson:MEAN`` (1 + Poisson(MEAN - 1),
    so every subject has at least one item) and ``uniform:LO:HI`` (inclusive).
    """
    kind, args = _parse_count_spec(spec)
    if kind == "const":
        counts = np.full(n_subjects, int(args[0]), dtype=np.int64)
    elif kind == "poisson":
        if args[0] < 1:
            raise ValueError("poisson mean must be >= 1")
        counts = 1 + rng.poisson(args[0] - 1.0, size=n_subjects)
    else:
        lo, hi = int(args[0]), int(args[1])
        if not 1 <= lo <= hi:
            raise ValueError("uniform items_per_subject needs 1 <= LO <= HI")
        counts = rng.integers(lo, hi + 1, size=n_subjects)
    if counts.min() < 1:
        raise ValueError("every subject needs at least one item")
    return counts


def _class_means(num_classes: int, d_in: int, sep: float, rng) -> np.ndarray:
    # Pairwise distance between class means is `sep` when num_classes <= d_in.
    if num_classes <= d_in:
        q, _ = np.linalg.qr(rng.standard_normal((d_in, num_classes)))
        directions = q.T
    else:
        directions = rng.standard_normal((num_classes, d_in))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return directions * (sep / math.sqrt(2.0))


def generate_synthetic(
    n_subjects: int,
    items_per_subject="const:1",
    d_in: int = 2,
    num_classes: int = 2,
    seed: int = 0,
    class_sep: float = 3.0,
    subject_offset: float = 0.5,
) -> SubjectDataset:
    """Generates a registry of subject-tagged items.

    Items of class ``y`` are drawn from ``N(mu_y + o_s, I)`` where ``o_s`` is a
    per-subject offset whose expected norm is ``subject_offset * class_sep``,
    so subject identity is visible in the features. Labels are uniform over
    classes. Items come out grouped by subject, subjects numbered 0..n-1.
    """
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    rng = np.random.default_rng(seed)
    counts = draw_items_per_subject(items_per_subject, n_subjects, rng)
    means = _class_means(num_classes, d_in, class_sep, rng)
    offsets = rng.standard_normal((n_subjects, d_in)) * (
        subject_offset * class_sep / math.sqrt(d_in)
    )
    subjects = np.repeat(np.arange(n_subjects, dtype=np.int64), counts)
    labels = rng.integers(0, num_classes, size=len(subjects))
    features = (
        means[labels] + offsets[subjects] + rng.standard_normal((len(subjects), d_in))
    )
    return SubjectDataset(features, labels, subjects, num_classes)


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def _layout_from_assignment(
    registry: SubjectDataset, owner: np.ndarray, n_users: int
) -> FederationLayout:
    users = [registry.subset(np.flatnonzero(owner == u)) for u in range(n_users)]
    return FederationLayout(n_users, users, np.unique(registry.subjects))


def _check_partition_args(registry: SubjectDataset, n_users: int) -> None:
    if len(registry) == 0:
        raise ValueError("cannot partition an empty registry")
    if n_users < 1:
        raise ValueError("n_users must be >= 1")


def partition_uniform(registry: SubjectDataset, n_users: int, seed: int = 0) -> FederationLayout:
    """Places every item at a user drawn uniformly and independently."""
    _check_partition_args(registry, n_users)
    rng = np.random.default_rng(seed)
    owner = rng.integers(0, n_users, size=len(registry))
    return _layout_from_assignment(registry, owner, n_users)


def power_bin_weights(n_users: int, alpha: float) -> np.ndarray:
    """Probability that a power(alpha) draw lands in each of n equal bins."""
    edges = (np.arange(n_users + 1) / n_users) ** alpha
    return np.diff(edges)


def partition_power(
    registry: SubjectDataset, n_users: int, alpha: float, seed: int = 0
) -> FederationLayout:
    """Places each subject's items according to the power density alpha*x**(alpha-1).

    For every item a draw ``x = u**(1/alpha)`` is mapped to one of ``n_users``
    equal-width bins of [0, 1]; a per-subject random permutation maps bins to
    users, so different subjects concentrate on different users. Per subject
    this is a multinomial over users with weights ``power_bin_weights``;
    alpha=1 reduces exactly to ``partition_uniform``.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    _check_partition_args(registry, n_users)
    rng = np.random.default_rng(seed)
    owner = np.empty(len(registry), dtype=np.int64)
    for subject, positions in registry.subject_index.items():
        perm = rng.permutation(n_users)
        x = rng.random(len(positions)) ** (1.0 / alpha)
        bins = np.minimum((x * n_users).astype(np.int64), n_users - 1)
        owner[positions] = perm[bins]
    return _layout_from_assignment(registry, owner, n_users)


def train_validation_split(
    registry: SubjectDataset, validation_fraction: float, seed: int = 0
) -> tuple[SubjectDataset, SubjectDataset]:
    if not 0 <= validation_fraction < 1:
        raise ValueError("validation_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    n = len(registry)
    n_val = int(round(n * validation_fraction))
    perm = rng.permutation(n)
    return registry.subset(np.sort(perm[n_val:])), registry.subset(np.sort(perm[:n_val]))


# ---------------------------------------------------------------------------
# Minibatches and group counts
# ---------------------------------------------------------------------------


def sample_minibatch(dataset: SubjectDataset, B: int, rng: np.random.Generator) -> Minibatch:
    """Draws B distinct positions uniformly without replacement.

    If B is at least the dataset size the whole dataset is returned with q=1.
    """
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot sample from an empty dataset")
    if B >= n:
        return Minibatch(np.arange(n, dtype=np.int64), 1.0)
    positions = rng.choice(n, size=B, replace=False)
    return Minibatch(positions.astype(np.int64), B / n)


def largest_group_count(dataset: SubjectDataset, batch: Minibatch) -> int:
    """Largest number of batch items that share one subject."""
    if batch.size == 0:
        raise ValueError("batch is empty")
    _, counts = np.unique(dataset.subjects[batch.positions], return_counts=True)
    return int(counts.max())


def max_subject_cardinality(dataset: SubjectDataset) -> int:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return max(len(p) for p in dataset.subject_index.values())


def mean_subject_cardinality(dataset: SubjectDataset) -> float:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    return len(dataset) / len(dataset.subject_index)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for CSV input.

    ``feature_columns=None`` selects every column named ``f<i>`` in index order.
    """

    subject_column: str
    label_column: str = "label"
    feature_columns: tuple[str, ...] | None = None


def load_csv(path, schema: CsvSchema, num_classes: int | None = None) -> SubjectDataset:
    """Parses a header-first CSV file into a SubjectDataset.

    Raises:
      DataFormatError: a mapped column is missing or a row is malformed; the
        message names the offending line.
    """
    if not schema.subject_column:
        raise DataFormatError("a subject column is required")
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if schema.feature_columns is None:
            feats = sorted(
                (h for h in header if h.startswith("f") and h[1:].isdigit()),
                key=lambda h: int(h[1:]),
            )
        else:
            feats = list(schema.feature_columns)
        for col in [schema.subject_column, schema.label_column, *feats]:
            if col not in header:
                raise DataFormatError(f"{path}: missing column {col!r}")
        if not feats:
            raise DataFormatError(f"{path}: no feature columns")
        fidx = [header.index(c) for c in feats]
        lidx = header.index(schema.label_column)
        sidx = header.index(schema.subject_column)

        features, labels, subjects = [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{line}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                x = [float(row[i]) for i in fidx]
            except ValueError:
                raise DataFormatError(f"{path}:{line}: non-numeric feature value") from None
            if not all(math.isfinite(v) for v in x):
                raise DataFormatError(f"{path}:{line}: non-finite feature value")
            try:
                y = int(row[lidx])
                s = int(row[sidx])
            except ValueError:
                raise DataFormatError(
                    f"{path}:{line}: label and subject must be integers"
                ) from None
            if y < 0 or s < 0:
                raise DataFormatError(f"{path}:{line}: negative label or subject")
            features.append(x)
            labels.append(y)
            subjects.append(s)

    if not labels:
        raise DataFormatError(f"{path}: no data rows")
    inferred = max(labels) + 1
    if num_classes is None:
        num_classes = max(inferred, 2)
    elif inferred > num_classes:
        raise DataFormatError(f"{path}: label {inferred - 1} >= num_classes={num_classes}")
    return SubjectDataset(np.array(features), np.array(labels), np.array(subjects), num_classes)


def write_csv(path, dataset: SubjectDataset) -> None:
    """Writes ``dataset`` in the f0..f{d-1},label,subject layout."""
    header = [f"f{i}" for i in range(dataset.d_in)] + ["label", "subject"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y, s in zip(dataset.features, dataset.labels, dataset.subjects):
            w.writerow([repr(float(v)) for v in x] + [int(y), int(s)])
