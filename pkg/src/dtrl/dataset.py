"""CSV ingestion, min-max normalization and the 16-point XOR toy tasks."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from dtrl.errors import (
    EmptyDatasetError,
    InvalidDatasetError,
    MissingFileError,
    MissingLabelColumnError,
    NoFeatureColumnsError,
    NonNumericFeatureError,
)


@dataclass(frozen=True)
class RawDataset:
    """Rows as read from disk, before any scaling."""

    features: np.ndarray  # (N, d) float64
    labels: tuple[str, ...]
    feature_names: tuple[str, ...]
    label_name: str = "label"
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim != 2:
            raise InvalidDatasetError("feature matrix must be 2-dimensional")
        if x.shape[0] == 0:
            raise EmptyDatasetError("dataset has no rows")
        if x.shape[1] == 0:
            raise NoFeatureColumnsError("no feature columns")
        if x.shape[0] != len(self.labels):
            raise InvalidDatasetError(f"{x.shape[0]} feature rows but {len(self.labels)} labels")
        if x.shape[1] != len(self.feature_names):
            raise InvalidDatasetError("feature_names does not match the number of columns")
        if not np.all(np.isfinite(x)):
            raise InvalidDatasetError("feature values must be finite")
        if len(set(self.labels)) < 2:
            raise InvalidDatasetError("at least 2 distinct labels are required")
        object.__setattr__(self, "features", x)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Normalized samples in [0, 1]^d with integer class labels.

    ``scaler`` holds the per-feature (min, max) used by :func:`normalize`, so
    thresholds learned in normalized units can be mapped back with
    :meth:`denormalize`.
    """

    samples: np.ndarray  # (N, d) in [0, 1]
    labels: np.ndarray  # (N,) int64 in 0..K-1
    class_names: tuple[str, ...]
    feature_names: tuple[str, ...]
    scaler: np.ndarray  # (d, 2): min, max
    name: str = ""
    label_name: str = "label"

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
            raise InvalidDatasetError("samples must be a non-empty N x d matrix")
        if y.shape != (x.shape[0],):
            raise InvalidDatasetError("labels must have one entry per sample")
        if np.any(x < 0.0) or np.any(x > 1.0) or not np.all(np.isfinite(x)):
            raise InvalidDatasetError("samples must lie in [0, 1]")
        k = len(self.class_names)
        if k == 0 or np.any(y < 0) or np.any(y >= k):
            raise InvalidDatasetError("labels must index into class_names")
        if len(np.unique(y)) != k:
            raise InvalidDatasetError("every class must occur at least once")
        if len(self.feature_names) != x.shape[1]:
            raise InvalidDatasetError("feature_names does not match the number of columns")
        scaler = np.asarray(self.scaler, dtype=float).reshape(x.shape[1], 2)
        x.setflags(write=False)
        y.setflags(write=False)
        scaler.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "scaler", scaler)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_features(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def denormalize(self, values, feature=None):
        """Map normalized values back to raw units.

        With ``feature`` given, ``values`` are for that single column;
        otherwise ``values`` is an (..., d) array.
        """
        lo, hi = self.scaler[:, 0], self.scaler[:, 1]
        if feature is not None:
            return lo[feature] + np.asarray(values, dtype=float) * (hi[feature] - lo[feature])
        return lo + np.asarray(values, dtype=float) * (hi - lo)

    def to_raw(self) -> RawDataset:
        return RawDataset(
            features=self.denormalize(self.samples),
            labels=tuple(self.class_names[i] for i in self.labels),
            feature_names=self.feature_names,
            label_name=self.label_name,
            name=self.name,
        )


def load_csv(path, label_column: str, name: str | None = None) -> RawDataset:
    """Read a comma-separated file with one header row."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise MissingFileError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        if label_column not in header:
            raise MissingLabelColumnError(f"{path}: label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
        feature_idx = [i for i in range(len(header)) if i != label_idx]
        if not feature_idx:
            raise NoFeatureColumnsError(f"{path}: no feature columns")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InvalidDatasetError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            values = []
            for i in feature_idx:
                cell = row[i].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumericFeatureError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {header[i]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise NonNumericFeatureError(f"{path}:{lineno}: non-finite value in column {header[i]!r}")
                values.append(v)
            rows.append(values)
            labels.append(row[label_idx].strip())
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    if name is None:
        name = os.path.splitext(os.path.basename(path))[0]
    return RawDataset(
        features=np.array(rows, dtype=float),
        labels=tuple(labels),
        feature_names=tuple(header[i] for i in feature_idx),
        label_name=label_column,
        name=name,
    )


def normalize_array(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Min-max scale each column of ``x``; constant columns become 0."""
    x = np.asarray(x, dtype=float)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    # guard against rounding just outside the unit interval
    np.clip(out, 0.0, 1.0, out=out)
    return out, np.stack([lo, hi], axis=1)


def normalize(raw: RawDataset) -> Dataset:
    samples, scaler = normalize_array(raw.features)
    class_names: list[str] = []
    index: dict[str, int] = {}
    for lab in raw.labels:
        if lab not in index:
            index[lab] = len(class_names)
            class_names.append(lab)
    labels = np.array([index[lab] for lab in raw.labels], dtype=np.int64)
    return Dataset(
        samples=samples,
        labels=labels,
        class_names=tuple(class_names),
        feature_names=raw.feature_names,
        scaler=scaler,
        name=raw.name,
        label_name=raw.label_name,
    )


def write_csv(path, raw: RawDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*raw.feature_names, raw.label_name])
        for row, lab in zip(raw.features, raw.labels):
            writer.writerow([repr(float(v)) for v in row] + [lab])


# --- toy benchmark -----------------------------------------------------------

TOY_MARGIN = 0.05


@dataclass(frozen=True)
class ToyTask:
    dataset: Dataset
    truth_tree: object  # dtrl.tree.DecisionTree
    seed: int
    root_feature: int = 0
    polarity: int = 0
    raw: RawDataset | None = field(default=None, repr=False)


def gen_toy(seed: int) -> ToyTask:
    """Build a 16-sample, 2-feature XOR task that a depth-2 tree classifies perfectly.

    Cells of the 2x2 grid at 0.5 carry labels ``a xor b xor polarity``. Four
    points are drawn in each of the cells (0, 0) and (0, 1), strictly inside
    the cell with margin ``TOY_MARGIN``; the other two cells receive the
    point reflection ``x -> 1 - x``. The reflection keeps every column
    symmetric about 0.5, so min-max normalization (which the CLI applies when
    the exported CSV is read back) maps 0.5 to 0.5 and preserves the cells.
    """
    from dtrl.tree import DecisionTree

    rng = np.random.default_rng(seed)
    root_feature = int(rng.integers(2))
    polarity = int(rng.integers(2))
    lo, hi = TOY_MARGIN, 0.5 - TOY_MARGIN
    half = []
    for cell in ((0, 0), (0, 1)):
        pts = rng.uniform(lo, hi, size=(4, 2))
        pts += 0.5 * np.array(cell, dtype=float)
        half.append(pts)
    half = np.concatenate(half)
    points = np.concatenate([half, 1.0 - half])
    order = rng.permutation(len(points))
    points = points[order]

    cell_bits = (points > 0.5).astype(int)
    label_bits = cell_bits[:, 0] ^ cell_bits[:, 1] ^ polarity
    names = ("C1", "C2")
    raw = RawDataset(
        features=points,
        labels=tuple(names[b] for b in label_bits),
        feature_names=("f0", "f1"),
        label_name="label",
        name=f"toy-{seed}",
    )
    dataset = normalize(raw)

    # class index of label bit b, per first-occurrence ordering
    bit_to_class = {b: dataset.class_names.index(names[b]) for b in (0, 1)}
    other = 1 - root_feature
    half_frac = Fraction(1, 2)
    tree = DecisionTree.empty(
        class_names=dataset.class_names,
        feature_names=dataset.feature_names,
        metadata={"dataset": raw.name, "solver": "ground-truth", "seed": str(seed)},
    )

    def leaf_for(bit_root, bit_other):
        bits = [0, 0]
        bits[root_feature] = bit_root
        bits[other] = bit_other
        return tree.add_leaf(bit_to_class[bits[0] ^ bits[1] ^ polarity])

    children = []
    for bit_root in (0, 1):
        low = leaf_for(bit_root, 0)
        high = leaf_for(bit_root, 1)
        children.append(
            tree.add_split(other, half_frac, float(dataset.denormalize(0.5, other)), low, high)
        )
    tree.root = tree.add_split(
        root_feature, half_frac, float(dataset.denormalize(0.5, root_feature)), children[0], children[1]
    )
    tree.validate()
    return ToyTask(
        dataset=dataset, truth_tree=tree, seed=seed, root_feature=root_feature, polarity=polarity, raw=raw
    )
