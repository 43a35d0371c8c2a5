"""Exact per-prediction Shapley attributions for trees, their aggregation
into per-model explanation vectors, and a coalition-enumeration oracle.

Attributions are interventional: the value of a coalition S is the expected
tree output when features in S are pinned to the explained row and the rest
are marginalized over the rows of a background dataset. Local accuracy and
missingness are asserted on every computed explanation, not sampled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .data import Dataset
from .tree import Tree

LOCAL_ACCURACY_TOL = 1e-9
BACKGROUND_CAP = 2000


@dataclass(frozen=True)
class Explanation:
    phi: np.ndarray
    base_value: float


@dataclass(frozen=True)
class ExplanationVector:
    """Mean |phi| per feature over an evaluation dataset, L2-normalized.

    All-zero vectors (constant models) are left as zero.
    """
    e: np.ndarray
    model_id: str = ""


@lru_cache(maxsize=None)
def _shapley_weight_tables(max_conditions: int) -> tuple[np.ndarray, np.ndarray]:
    """WA[a, b] = (a-1)! b! / (a+b)!,  WB[a, b] = a! (b-1)! / (a+b)!"""
    size = max_conditions + 1
    wa = np.zeros((size, size))
    wb = np.zeros((size, size))
    for a in range(size):
        for b in range(size):
            if a + b == 0 or a + b > max_conditions:
                continue
            denom = math.factorial(a + b)
            if a >= 1:
                wa[a, b] = math.factorial(a - 1) * math.factorial(b) / denom
            if b >= 1:
                wb[a, b] = math.factorial(a) * math.factorial(b - 1) / denom
    return wa, wb


def _check_explanations(tree: Tree, X: np.ndarray, phi: np.ndarray,
                        base: float):
    preds = tree.predict_batch(X)
    err = np.abs(base + phi.sum(axis=1) - preds)
    if err.size and err.max() > LOCAL_ACCURACY_TOL:
        raise AssertionError(
            f"local accuracy violated: max error {err.max():.3e}")
    outside = np.ones(X.shape[1], dtype=bool)
    outside[list(tree.subset.indices)] = False
    if outside.any() and np.abs(phi[:, outside]).max(initial=0.0) != 0.0:
        raise AssertionError("missingness violated: attribution outside the"
                             " tree's feature subset")


def tree_shap_batch(tree: Tree, X: np.ndarray, background: Dataset
                    ) -> tuple[np.ndarray, float]:
    """Exact interventional Shapley values for every row of X.

    Returns (phi matrix, base_value); base_value is the mean tree prediction
    over the background rows.
    """
    if background.n_rows == 0:
        raise ValueError("background dataset is empty")
    X = np.ascontiguousarray(X, dtype=np.float64)
    cond_feat, cond_lo, cond_hi, leaf_ptr, leaf_val = tree.leaf_intervals()
    max_c = int(np.max(np.diff(leaf_ptr))) if leaf_ptr.size > 1 else 0
    wa, wb = _shapley_weight_tables(max(max_c, 1))
    phi = _kernels.shap_interventional(
        cond_feat, cond_lo, cond_hi, leaf_ptr, leaf_val,
        X, background.rows, wa, wb)
    base = float(tree.predict_batch(background.rows).mean())
    _check_explanations(tree, X, phi, base)
    return phi, base


def tree_shap(tree: Tree, row: np.ndarray, background: Dataset) -> Explanation:
    row = np.asarray(row, dtype=np.float64)
    phi, base = tree_shap_batch(tree, row[None, :], background)
    return Explanation(phi=phi[0], base_value=base)


def brute_force_shapley(tree: Tree, row: np.ndarray, background: Dataset
                        ) -> Explanation:
    """Classic Shapley sum over all coalitions of the tree's subset.

    v(S) is the mean tree output over background rows with the features in S
    pinned to `row`. Features outside the subset are dummy players and get 0.
    """
    feats = tree.subset.indices
    s = len(feats)
    if s > 12:
        raise ValueError("brute force limited to subsets of size <= 12")
    row = np.asarray(row, dtype=np.float64)
    Zb = background.rows
    v = np.empty(1 << s)
    for mask in range(1 << s):
        hybrid = Zb.copy()
        for j in range(s):
            if mask >> j & 1:
                hybrid[:, feats[j]] = row[feats[j]]
        v[mask] = tree.predict_batch(hybrid).mean()
    weights = np.array([math.factorial(k) * math.factorial(s - k - 1)
                        / math.factorial(s) for k in range(s)])
    popcount = np.array([bin(m).count("1") for m in range(1 << s)])
    phi = np.zeros(row.size)
    for j in range(s):
        bit = 1 << j
        without = np.array([m for m in range(1 << s) if not m & bit])
        phi[feats[j]] = np.sum(weights[popcount[without]]
                               * (v[without | bit] - v[without]))
    return Explanation(phi=phi, base_value=float(v[0]))


def explanation_vector(tree: Tree, eval_ds: Dataset,
                       background: Dataset | None = None,
                       model_id: str = "") -> ExplanationVector:
    """Aggregate |phi| over the rows of eval_ds into one unit vector.

    The background defaults to eval_ds itself; the pipeline passes the
    training split (capped) so clustering distances share one reference.
    """
    if eval_ds.n_rows == 0:
        raise ValueError("eval dataset is empty")
    phi, _ = tree_shap_batch(tree, eval_ds.rows,
                             background if background is not None else eval_ds)
    e = np.abs(phi).mean(axis=0)
    norm = np.linalg.norm(e)
    if norm > 0.0:
        e = e / norm
    return ExplanationVector(e=e, model_id=model_id)


def background_sample(train: Dataset, cap: int = BACKGROUND_CAP,
                      seed: int = 0) -> Dataset:
    """Seeded row subsample bounding the SHAP background size."""
    if train.n_rows <= cap:
        return train
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(train.n_rows, size=cap, replace=False))
    return train.take(keep)
