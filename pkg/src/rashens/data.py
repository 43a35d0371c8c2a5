"""Tabular data model: CSV ingestion, splitting, standardization and the
perturbations used to simulate production distributions.

Column typing at ingestion is inferred: a column is numeric iff every cell
parses as a float, otherwise it is categorical and is one-hot encoded with
categories in lexicographic order. Missing cells (empty strings) are rejected
outright; there is no imputation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

CLASSIFICATION = "binary-classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("schema needs at least one feature")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")

    @property
    def d(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool mask of zero-deviation features

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.astype(int).tolist(),
        }


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str  # "gaussian" | "shuffle"
    sigma2: float = 0.0
    fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "shuffle"):
            raise ValueError(f"unknown perturbation kind: {self.kind}")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must be in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Immutable rows/labels pair; arrays are locked after construction."""

    rows: np.ndarray
    labels: np.ndarray
    schema: FeatureSchema
    task: str

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-D matrix")
        if rows.shape[0] != labels.shape[0]:
            raise ValueError("row count must equal label count")
        if rows.shape[1] != self.schema.d:
            raise ValueError("row width must equal schema size")
        if rows.size and not np.isfinite(rows).all():
            raise ValueError("rows contain NaN or infinite values")
        if labels.size and not np.isfinite(labels).all():
            raise ValueError("labels contain NaN or infinite values")
        if self.task not in TASKS:
            raise ValueError(f"unknown task: {self.task}")
        if self.task == CLASSIFICATION and labels.size:
            if not np.isin(labels, (0.0, 1.0)).all():
                raise ValueError("classification labels must be 0/1")
        rows.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def replace_rows(self, rows: np.ndarray) -> "Dataset":
        return Dataset(rows, self.labels.copy(), self.schema, self.task)

    def take(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.rows[indices], self.labels[indices],
                       self.schema, self.task)


def _is_float(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path: str | Path, target_column: str, task: str) -> Dataset:
    """Load a UTF-8 comma-separated file with a header row.

    The target column is removed from the features; categorical feature
    columns are one-hot encoded deterministically. Raises on missing files,
    a missing target column, empty data, missing cells and non-numeric
    targets.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if task not in TASKS:
        raise ValueError(f"unknown task: {task}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False,
                         encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: empty file") from None
    if df.shape[0] == 0:
        raise ValueError(f"{path}: no data rows")
    if target_column not in df.columns:
        raise ValueError(f"target column not found: {target_column!r}")

    for col in df.columns:
        stripped = df[col].str.strip()
        if (stripped == "").any():
            raise ValueError(f"missing values in column {col!r}"
                             " (no imputation is performed)")
        df[col] = stripped

    target_raw = df[target_column]
    if not target_raw.map(_is_float).all():
        raise ValueError(
            f"non-numeric cell in numeric column {target_column!r}")
    labels = target_raw.astype(np.float64).to_numpy()
    if not np.isfinite(labels).all():
        raise ValueError(f"target column {target_column!r} has NaN/inf")
    if task == CLASSIFICATION and not np.isin(labels, (0.0, 1.0)).all():
        raise ValueError("classification labels must be 0/1")

    columns: list[np.ndarray] = []
    names: list[str] = []
    for col in df.columns:
        if col == target_column:
            continue
        series = df[col]
        if series.map(_is_float).all():
            values = series.astype(np.float64).to_numpy()
            if not np.isfinite(values).all():
                raise ValueError(f"column {col!r} has NaN/inf values")
            columns.append(values)
            names.append(col)
        else:
            for cat in sorted(series.unique()):
                columns.append((series == cat).to_numpy(np.float64))
                names.append(f"{col}={cat}")
    if not columns:
        raise ValueError("no feature columns besides the target")
    rows = np.column_stack(columns)
    return Dataset(rows, labels, FeatureSchema(tuple(names)), task)


def save_csv(ds: Dataset, path: str | Path, target_name: str = "target"):
    """Re-emit a dataset as CSV for audit."""
    df = pd.DataFrame(ds.rows, columns=list(ds.schema.names))
    df[target_name] = ds.labels
    df.to_csv(path, index=False)


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic train/test partition; stratified by class for
    classification. Train takes floor(fraction * n) rows per stratum, the
    remainder goes to test. Row order within each side is preserved.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    if ds.task == CLASSIFICATION:
        for cls in (0.0, 1.0):
            members = np.flatnonzero(ds.labels == cls)
            n_train = math.floor(train_fraction * members.size)
            if n_train == 0 or n_train == members.size:
                raise ValueError(
                    f"split leaves class {int(cls)} absent from one side")
            perm = rng.permutation(members.size)
            train_idx.append(members[perm[:n_train]])
    else:
        n_train = math.floor(train_fraction * ds.n_rows)
        if n_train == 0 or n_train == ds.n_rows:
            raise ValueError("split leaves one side empty")
        perm = rng.permutation(ds.n_rows)
        train_idx.append(perm[:n_train])
    chosen = np.sort(np.concatenate(train_idx))
    mask = np.zeros(ds.n_rows, dtype=bool)
    mask[chosen] = True
    return ds.take(np.flatnonzero(mask)), ds.take(np.flatnonzero(~mask))


def standardize(train: Dataset, others: list[Dataset] | None = None,
                ) -> tuple[list[Dataset], ScalerParams]:
    """Scale every dataset by the training per-feature mean and population
    std. Constant training features are mapped to 0 everywhere.

    Returns ([train_scaled, *others_scaled], params).
    """
    if train.n_rows == 0:
        raise ValueError("train dataset is empty")
    others = others or []
    mean = train.rows.mean(axis=0)
    std = train.rows.std(axis=0)  # population std, ddof=0
    constant = std == 0.0
    safe_std = np.where(constant, 1.0, std)

    def transform(ds: Dataset) -> Dataset:
        scaled = (ds.rows - mean) / safe_std
        scaled[:, constant] = 0.0
        return ds.replace_rows(scaled)

    params = ScalerParams(mean=mean, std=std, constant=constant)
    return [transform(train)] + [transform(ds) for ds in others], params


def perturb(ds: Dataset, spec: PerturbationSpec) -> Dataset:
    """Simulate covariate drift: additive Gaussian noise on every feature
    value, or independent permutation of ceil(fraction * d) whole feature
    columns. Labels and row count never change; bit-identical given the seed.
    """
    if spec.kind == "gaussian":
        if spec.sigma2 == 0.0:
            return ds.replace_rows(ds.rows.copy())
        rng = np.random.default_rng(spec.seed)
        noise = rng.normal(0.0, math.sqrt(spec.sigma2), size=ds.rows.shape)
        return ds.replace_rows(ds.rows + noise)
    n_cols = math.ceil(spec.fraction * ds.d)
    rows = ds.rows.copy()
    if n_cols > 0:
        rng = np.random.default_rng(spec.seed)
        chosen = np.sort(rng.choice(ds.d, size=n_cols, replace=False))
        for col in chosen:
            rows[:, col] = rows[rng.permutation(ds.n_rows), col]
    return ds.replace_rows(rows)
