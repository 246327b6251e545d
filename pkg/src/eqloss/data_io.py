"""Synthetic data generation, CSV ingestion, splits, and standardization.

The reference benchmark distribution is a four-component planar Gaussian
mixture whose class posterior is known in closed form, which is what lets
oracle uncertainties and Bayes-gap measurements stay exact. CSV ingestion
covers numeric feature tables with one label column: shuffled 80-20 split
by seed, per-feature z-scores fit on the training split only, optional
subsample before the split, and a JSON metadata sidecar describing the
provenance well enough to reproduce the split bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .oracles import GaussianMixtureOracle, MixtureComponent

GaussianMixtureSpec = GaussianMixtureOracle

LABEL_KINDS = ("binary", "multiclass", "real")

STD_FLOOR = 1e-12


def reference_mixture() -> GaussianMixtureOracle:
    """The benchmark mixture: four isotropic components on the axes.

    Centers (-2,0), (2,0), (0,-2), (0,2) with standard deviation 0.5,
    weights 0.2, 0.3, 0.4, 0.1; the first two components carry label +1.
    Positive-class mass is exactly one half.
    """
    return GaussianMixtureOracle(
        (
            MixtureComponent(np.array([-2.0, 0.0]), 0.5, 0.2, 1),
            MixtureComponent(np.array([2.0, 0.0]), 0.5, 0.3, 1),
            MixtureComponent(np.array([0.0, -2.0]), 0.5, 0.4, -1),
            MixtureComponent(np.array([0.0, 2.0]), 0.5, 0.1, -1),
        )
    )


def draw_mixture(
    dist: GaussianMixtureOracle, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """n i.i.d. draws: component index by weight, then isotropic Gaussian."""
    weights = np.array([c.weight for c in dist.components])
    centers = np.stack([np.asarray(c.center, dtype=float) for c in dist.components])
    stds = np.array([c.std for c in dist.components])
    comp = rng.choice(len(weights), size=n, p=weights)
    X = centers[comp] + stds[comp, None] * rng.standard_normal((n, centers.shape[1]))
    return X, comp


def draw_features(dist: GaussianMixtureOracle, n: int, rng: np.random.Generator) -> np.ndarray:
    X, _ = draw_mixture(dist, n, rng)
    return X


@dataclass(frozen=True)
class Standardization:
    """Per-feature z-score parameters fit on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.std


@dataclass(frozen=True)
class DatasetHandle:
    """Immutable feature matrix plus labels and their provenance.

    Arrays are frozen after construction so handles can be shared across
    concurrent readers without copies.
    """

    features: np.ndarray
    labels: np.ndarray
    label_kind: str
    feature_names: tuple = ()
    stats: Optional[Standardization] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        X = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if X.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must align with feature rows")
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label_kind must be one of {LABEL_KINDS}")
        X = X.copy()
        y = y.copy()
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        names = tuple(self.feature_names) or tuple(
            f"x{i}" for i in range(X.shape[1])
        )
        if len(names) != X.shape[1]:
            raise ValueError("feature_names must match the feature count")
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def sample_mixture(dist: GaussianMixtureOracle, n: int, seed: int) -> DatasetHandle:
    """Draw a labeled dataset from the mixture; label = component label."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    X, comp = draw_mixture(dist, n, rng)
    labels = np.array([dist.components[c].label for c in comp], dtype=float)
    return DatasetHandle(
        features=X,
        labels=labels,
        label_kind="binary",
        provenance={"source": "synthetic_mixture", "n": n, "seed": seed},
    )


@dataclass(frozen=True)
class CsvSchema:
    """Which column holds the label, what kind it is, which columns are features.

    feature_columns None means every non-label column, in header order.
    """

    label_column: str
    label_kind: str
    feature_columns: Optional[tuple] = None

    def __post_init__(self) -> None:
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label_kind must be one of {LABEL_KINDS}")
        if self.feature_columns is not None:
            object.__setattr__(self, "feature_columns", tuple(self.feature_columns))


class CsvFormatError(ValueError):
    """Parse failure carrying the 1-based line number of the offending row."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


def _parse_csv(path, schema: CsvSchema):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "empty file") from None
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise CsvFormatError(1, f"label column {schema.label_column!r} not in header")
        label_idx = header.index(schema.label_column)
        if schema.feature_columns is None:
            feat_names = [h for h in header if h != schema.label_column]
        else:
            for name in schema.feature_columns:
                if name not in header:
                    raise CsvFormatError(1, f"feature column {name!r} not in header")
            feat_names = list(schema.feature_columns)
        feat_idx = [header.index(name) for name in feat_names]

        rows = []
        raw_labels = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    line_no, f"expected {len(header)} cells, found {len(row)}"
                )
            feats = np.empty(len(feat_idx))
            for k, j in enumerate(feat_idx):
                cell = row[j].strip()
                try:
                    feats[k] = float(cell)
                except ValueError:
                    raise CsvFormatError(
                        line_no, f"non-numeric feature cell {cell!r} in column {header[j]!r}"
                    ) from None
            rows.append(feats)
            raw_labels.append(row[label_idx].strip())
    if not rows:
        raise CsvFormatError(2, "no data rows")
    return feat_names, np.stack(rows), raw_labels


def _map_labels(raw: Sequence[str], kind: str):
    """Map raw label strings to floats; the mapping is recorded for metadata.

    Binary numeric labels already in {-1, +1} pass through unchanged so a
    written dataset reloads identically; anything else maps by first
    appearance (first value to +1, second to -1). Multiclass maps to
    1..K by first appearance. Real labels parse as floats.
    """
    if kind == "real":
        try:
            vals = np.array([float(s) for s in raw])
        except ValueError as exc:
            raise ValueError(f"non-numeric regression label: {exc}") from None
        return vals, {}
    order = []
    for s in raw:
        if s not in order:
            order.append(s)
    if kind == "binary":
        if len(order) > 2:
            raise ValueError(f"binary label column has {len(order)} distinct values")
        try:
            floats = sorted(float(s) for s in order)
            if all(f in (-1.0, 1.0) for f in floats):
                vals = np.array([float(s) for s in raw])
                return vals, {s: float(s) for s in order}
        except ValueError:
            pass
        mapping = {order[0]: 1.0}
        if len(order) > 1:
            mapping[order[1]] = -1.0
        vals = np.array([mapping[s] for s in raw])
        return vals, mapping
    mapping = {s: float(i + 1) for i, s in enumerate(order)}
    vals = np.array([mapping[s] for s in raw])
    return vals, mapping


def _indices_hash(idx: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(idx, dtype=np.int64).tobytes()).hexdigest()


def load_csv(
    path,
    schema: CsvSchema,
    *,
    split: float = 0.8,
    seed: int = 0,
    subsample: Optional[int] = None,
) -> tuple[DatasetHandle, DatasetHandle]:
    """Parse, optionally subsample, split, and standardize a CSV dataset.

    The split shuffles by seed; z-score statistics come from the training
    rows alone and are applied to both splits (std floored at 1e-12, so a
    constant column maps to exactly 0). Regression targets rescale to
    [-1, 1] by the training max-abs, recorded for the inverse transform.
    """
    if not 0.0 < split < 1.0:
        raise ValueError("split fraction must lie in (0, 1)")
    feat_names, X, raw_labels = _parse_csv(path, schema)
    y, mapping = _map_labels(raw_labels, schema.label_kind)

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n_all = X.shape[0]
    if subsample is not None and subsample < n_all:
        keep = rng.choice(n_all, size=subsample, replace=False)
        keep.sort()
        X, y = X[keep], y[keep]
    n = X.shape[0]
    perm = rng.permutation(n)
    n_train = int(round(split * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"split {split} leaves an empty side for n={n}")
    train_idx, test_idx = perm[:n_train], perm[n_train:]

    mean = X[train_idx].mean(axis=0)
    std = np.maximum(X[train_idx].std(axis=0), STD_FLOOR)
    stats = Standardization(mean=mean, std=std)

    label_scale = 1.0
    if schema.label_kind == "real":
        label_scale = max(float(np.max(np.abs(y[train_idx]))), STD_FLOOR)
        y = y / label_scale

    common = {
        "source": str(path),
        "seed": seed,
        "split": split,
        "subsample": subsample,
        "label_column": schema.label_column,
        "label_mapping": {str(k): v for k, v in mapping.items()},
        "label_scale": label_scale,
        "train_indices_sha256": _indices_hash(train_idx),
        "test_indices_sha256": _indices_hash(test_idx),
    }

    def handle(idx, role):
        prov = dict(common)
        prov["role"] = role
        prov["rows"] = int(len(idx))
        return DatasetHandle(
            features=stats.apply(X[idx]),
            labels=y[idx],
            label_kind=schema.label_kind,
            feature_names=tuple(feat_names),
            stats=stats,
            provenance=prov,
        )

    return handle(train_idx, "train"), handle(test_idx, "test")


def save_csv(handle: DatasetHandle, path, label_column: str = "label") -> None:
    """Write features and labels with round-trip-exact float text."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(handle.feature_names) + [label_column])
        for row, lab in zip(handle.features, handle.labels):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(lab))])


def read_csv(path, schema: CsvSchema) -> DatasetHandle:
    """Parse a CSV into a handle without splitting or standardizing."""
    feat_names, X, raw_labels = _parse_csv(path, schema)
    y, mapping = _map_labels(raw_labels, schema.label_kind)
    return DatasetHandle(
        features=X,
        labels=y,
        label_kind=schema.label_kind,
        feature_names=tuple(feat_names),
        provenance={
            "source": str(path),
            "label_mapping": {str(k): v for k, v in mapping.items()},
        },
    )


def dataset_metadata(train: DatasetHandle, test: DatasetHandle) -> dict:
    """The sidecar payload: schema, seed, split hashes, standardization."""
    stats = train.stats
    return {
        "train": dict(train.provenance),
        "test": dict(test.provenance),
        "feature_names": list(train.feature_names),
        "label_kind": train.label_kind,
        "standardization": None
        if stats is None
        else {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        "rows": {"train": train.n, "test": test.n},
    }


def save_dataset_metadata(path, train: DatasetHandle, test: DatasetHandle) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataset_metadata(train, test), fh, indent=1, sort_keys=True)
        fh.write("\n")
