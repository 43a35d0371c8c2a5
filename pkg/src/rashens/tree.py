"""CART decision trees restricted to a feature subset, plus the evaluation
metrics used for Rashomon membership: AUROC (Mann-Whitney, ties at 0.5) for
classification and MAPE for regression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .data import CLASSIFICATION, REGRESSION, Dataset

LEAF = _kernels.LEAF


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 8
    min_samples_leaf: int = 5
    criterion: str = "auto"  # "gini" | "variance" | "auto" (from task)

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.criterion not in ("auto", "gini", "variance"):
            raise ValueError(f"unknown criterion: {self.criterion}")

    def resolve_criterion(self, task: str) -> str:
        if self.criterion != "auto":
            return self.criterion
        return "gini" if task == CLASSIFICATION else "variance"

    def to_dict(self) -> dict:
        return {"max_depth": self.max_depth,
                "min_samples_leaf": self.min_samples_leaf,
                "criterion": self.criterion}


@dataclass(frozen=True, order=True)
class FeatureSubset:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) != len(set(idx)):
            raise ValueError("subset indices must be unique")
        if any(i < 0 for i in idx):
            raise ValueError("subset indices must be non-negative")
        object.__setattr__(self, "indices", tuple(sorted(idx)))

    @property
    def size(self) -> int:
        return len(self.indices)

    def with_feature(self, j: int) -> "FeatureSubset":
        return FeatureSubset(self.indices + (j,))


@dataclass(frozen=True)
class Tree:
    """Fitted tree stored as flat node arrays; feature holds global column
    indices for internal nodes and -1 for leaves."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    subset: FeatureSubset
    params: TreeParams
    task: str
    seed: int = 0

    def __post_init__(self):
        for arr in (self.feature, self.threshold, self.left, self.right,
                    self.value, self.count):
            arr.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int((self.feature == LEAF).sum())

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("expected a 2-D row matrix")
        return _kernels.predict_rows(self.feature, self.threshold, self.left,
                                     self.right, self.value, X)

    def leaf_intervals(self) -> tuple[np.ndarray, ...]:
        """Each leaf as a conjunction of per-feature intervals lo < x <= hi,
        CSR-flattened as (cond_feat, cond_lo, cond_hi, leaf_ptr, leaf_val).
        """
        cond_feat: list[int] = []
        cond_lo: list[float] = []
        cond_hi: list[float] = []
        leaf_ptr = [0]
        leaf_val: list[float] = []
        stack: list[tuple[int, dict[int, tuple[float, float]]]] = [(0, {})]
        while stack:
            node, box = stack.pop()
            f = int(self.feature[node])
            if f == LEAF:
                for ft in sorted(box):
                    lo, hi = box[ft]
                    cond_feat.append(ft)
                    cond_lo.append(lo)
                    cond_hi.append(hi)
                leaf_ptr.append(len(cond_feat))
                leaf_val.append(float(self.value[node]))
                continue
            thr = float(self.threshold[node])
            lo, hi = box.get(f, (-np.inf, np.inf))
            lbox = dict(box)
            lbox[f] = (lo, min(hi, thr))
            rbox = dict(box)
            rbox[f] = (max(lo, thr), hi)
            stack.append((int(self.right[node]), rbox))
            stack.append((int(self.left[node]), lbox))
        return (np.asarray(cond_feat, dtype=np.int64),
                np.asarray(cond_lo, dtype=np.float64),
                np.asarray(cond_hi, dtype=np.float64),
                np.asarray(leaf_ptr, dtype=np.int64),
                np.asarray(leaf_val, dtype=np.float64))

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            nodes.append({
                "feature": int(self.feature[i]),
                "threshold": float(self.threshold[i]),
                "left": int(self.left[i]),
                "right": int(self.right[i]),
                "value": float(self.value[i]),
                "count": int(self.count[i]),
            })
        return {"format": "rashens-tree/1",
                "subset": list(self.subset.indices),
                "params": self.params.to_dict(),
                "task": self.task,
                "seed": self.seed,
                "nodes": nodes}

    @staticmethod
    def from_dict(doc: dict) -> "Tree":
        nodes = doc["nodes"]
        return Tree(
            feature=np.array([n["feature"] for n in nodes], dtype=np.int64),
            threshold=np.array([n["threshold"] for n in nodes]),
            left=np.array([n["left"] for n in nodes], dtype=np.int64),
            right=np.array([n["right"] for n in nodes], dtype=np.int64),
            value=np.array([n["value"] for n in nodes]),
            count=np.array([n["count"] for n in nodes], dtype=np.int64),
            subset=FeatureSubset(tuple(doc["subset"])),
            params=TreeParams(**doc["params"]),
            task=doc["task"],
            seed=int(doc.get("seed", 0)),
        )

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @staticmethod
    def load(path: str | Path) -> "Tree":
        return Tree.from_dict(json.loads(Path(path).read_text()))


def fit_tree(ds: Dataset, subset: FeatureSubset, params: TreeParams,
             seed: int = 0) -> Tree:
    """Greedy CART on the subset's columns. Deterministic: ties in impurity
    decrease keep the lowest feature index, then the lowest threshold; the
    seed is recorded for provenance only.
    """
    if ds.n_rows == 0:
        raise ValueError("cannot fit on an empty dataset")
    if subset.size == 0:
        raise ValueError("feature subset is empty")
    if subset.indices[-1] >= ds.d:
        raise ValueError(
            f"subset references out-of-range feature {subset.indices[-1]}")
    criterion = params.resolve_criterion(ds.task)
    classification = criterion == "gini"
    Xs = np.ascontiguousarray(ds.rows[:, subset.indices])
    feature, threshold, left, right, value, count = _kernels.fit_tree_arrays(
        Xs, ds.labels, params.max_depth, params.min_samples_leaf,
        classification)
    # map subset-local split features back to global column indices
    glob = np.asarray(subset.indices, dtype=np.int64)
    feature = np.where(feature == LEAF, LEAF, glob[np.where(
        feature == LEAF, 0, feature)])
    return Tree(feature=feature, threshold=threshold, left=left, right=right,
                value=value, count=count, subset=subset, params=params,
                task=ds.task, seed=seed)


def predict(tree: Tree, row: np.ndarray) -> float:
    """Single-row traversal; value <= threshold goes left."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("expected a single feature vector")
    return float(tree.predict_batch(row[None, :])[0])


def _midranks(x: np.ndarray) -> np.ndarray:
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    mid = starts + (counts + 1) / 2.0
    return mid[inverse]


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC with ties counted 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int((labels == 1.0).sum())
    n_neg = int((labels == 0.0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = _midranks(scores)
    pos_rank_sum = ranks[labels == 1.0].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mape(predictions: np.ndarray, actuals: np.ndarray) -> float:
    """Mean absolute percentage error; undefined when any actual is 0."""
    predictions = np.asarray(predictions, dtype=np.float64)
    actuals = np.asarray(actuals, dtype=np.float64)
    if (actuals == 0.0).any():
        raise ValueError("MAPE undefined: an actual value is 0")
    return float(np.mean(np.abs(predictions - actuals) / np.abs(actuals)))


def evaluate(model, ds: Dataset) -> dict:
    """Loss report for a tree or ensemble (anything with predict_batch).

    Classification: {"auroc", "accuracy", "loss"} with loss = 1 - AUROC.
    Regression: {"mape", "loss"} with loss = MAPE.
    """
    if ds.n_rows == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = model.predict_batch(ds.rows)
    if ds.task == CLASSIFICATION:
        score = auroc(preds, ds.labels)
        acc = float(np.mean((preds >= 0.5) == (ds.labels == 1.0)))
        return {"auroc": score, "accuracy": acc, "loss": 1.0 - score}
    err = mape(preds, ds.labels)
    return {"mape": err, "loss": err}


def loss(model, ds: Dataset) -> float:
    return evaluate(model, ds)["loss"]
