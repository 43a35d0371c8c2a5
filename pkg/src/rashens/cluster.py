"""Partitioning of the Rashomon set in explanation space: k-means with
silhouette-driven k selection, clusteroid extraction, and a deterministic 2-D
projection for reporting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .explain import ExplanationVector

MAX_LLOYD_ITER = 300
RESTARTS = 5


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    member_ids: list[str]
    labels: np.ndarray  # cluster id per member, aligned with member_ids
    clusteroid_ids: list[str]
    silhouette: float | None = None

    @property
    def assignment(self) -> dict[str, int]:
        return {mid: int(c) for mid, c in zip(self.member_ids, self.labels)}

    def members_of(self, cluster_id: int) -> list[str]:
        return [mid for mid, c in zip(self.member_ids, self.labels)
                if c == cluster_id]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "silhouette": self.silhouette,
            "centroids": [[float(v) for v in row] for row in self.centroids],
            "assignment": self.assignment,
            "clusteroid_ids": list(self.clusteroid_ids),
        }

    @staticmethod
    def from_dict(doc: dict) -> "ClusterModel":
        member_ids = sorted(doc["assignment"])
        labels = np.array([doc["assignment"][m] for m in member_ids],
                          dtype=np.int64)
        return ClusterModel(k=int(doc["k"]),
                            centroids=np.asarray(doc["centroids"]),
                            member_ids=member_ids, labels=labels,
                            clusteroid_ids=list(doc["clusteroid_ids"]),
                            silhouette=doc.get("silhouette"))


def _as_matrix(vectors: list[ExplanationVector]) -> tuple[list[str], np.ndarray]:
    ids = [v.model_id for v in vectors]
    return ids, np.ascontiguousarray(np.stack([v.e for v in vectors]))


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator
                   ) -> np.ndarray:
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = X[first]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centroids; the
            # k <= distinct-count precondition makes this unreachable, but
            # fall back to the first unused distinct row to stay total
            seen = {tuple(row) for row in centroids[:c]}
            for i in range(n):
                if tuple(X[i]) not in seen:
                    centroids[c] = X[i]
                    break
        else:
            pick = int(rng.choice(n, p=d2 / total))
            centroids[c] = X[pick]
        d2 = np.minimum(d2, ((X - centroids[c]) ** 2).sum(axis=1))
    return centroids


def _distinct_count(X: np.ndarray) -> int:
    return np.unique(X, axis=0).shape[0]


def kmeans(vectors: list[ExplanationVector], k: int, seed: int) -> ClusterModel:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint (or
    300 iterations); empty clusters are reseeded to the farthest point.
    Deterministic given the seed. Silhouette is left unset.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids, X = _as_matrix(vectors)
    if k > _distinct_count(X):
        raise ValueError(f"k={k} exceeds the number of distinct vectors")
    rng = np.random.default_rng(seed)
    init = _kmeanspp_init(X, k, rng)
    labels, centroids, _, _ = _kernels.lloyd(X, init, MAX_LLOYD_ITER)
    model = ClusterModel(k=k, centroids=centroids, member_ids=ids,
                         labels=labels, clusteroid_ids=[])
    model.clusteroid_ids = clusteroids(model, vectors)
    return model


def silhouette(vectors: list[ExplanationVector], labels: np.ndarray) -> float:
    """Mean silhouette of an assignment; k >= 2 with no empty cluster."""
    _, X = _as_matrix(vectors)
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if labels.size else 0
    if k < 2:
        raise ValueError("silhouette undefined for k < 2")
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        raise ValueError("silhouette undefined with empty clusters")
    return float(_kernels.silhouette_samples(X, labels, k).mean())


def silhouette_samples(vectors: list[ExplanationVector],
                       labels: np.ndarray) -> np.ndarray:
    _, X = _as_matrix(vectors)
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1
    return _kernels.silhouette_samples(X, labels, k)


def select_k(vectors: list[ExplanationVector], k_min: int, k_max: int,
             seed: int) -> ClusterModel:
    """Scan k in [k_min, k_max] with 5 seeded restarts each and keep the
    (k, run) with maximal silhouette; ties go to smaller k, then earlier run.
    """
    _, X = _as_matrix(vectors)
    distinct = _distinct_count(X)
    if not 2 <= k_min <= k_max:
        raise ValueError("need 2 <= k_min <= k_max")
    if k_max > distinct:
        raise ValueError(f"k_max={k_max} exceeds distinct vectors ({distinct})")
    best: tuple[float, int, int] | None = None
    best_model: ClusterModel | None = None
    for k in range(k_min, k_max + 1):
        for run in range(RESTARTS):
            run_seed = int(np.random.SeedSequence(
                entropy=seed, spawn_key=(k, run)).generate_state(1)[0])
            model = kmeans(vectors, k, run_seed)
            score = silhouette(vectors, model.labels)
            key = (score, -k, -run)
            if best is None or key > best:
                best = key
                model.silhouette = score
                best_model = model
    return best_model


def clusteroids(model: ClusterModel, vectors: list[ExplanationVector]
                ) -> list[str]:
    """Per cluster, the member closest (Euclidean) to the centroid; ties go
    to the lowest member id.
    """
    ids, X = _as_matrix(vectors)
    if list(ids) != list(model.member_ids):
        order = {mid: i for i, mid in enumerate(ids)}
        X = X[[order[mid] for mid in model.member_ids]]
    out = []
    for c in range(model.k):
        rows = [i for i, lab in enumerate(model.labels) if lab == c]
        if not rows:
            raise ValueError(f"cluster {c} is empty")
        dists = np.linalg.norm(X[rows] - model.centroids[c], axis=1)
        ranked = sorted((float(dists[i]), model.member_ids[rows[i]])
                        for i in range(len(rows)))
        out.append(ranked[0][1])
    return out


def project_2d(vectors: list[ExplanationVector]) -> np.ndarray:
    """PCA onto the top-2 principal axes of the centered explanation matrix.

    Sign convention: the largest-magnitude loading of each axis is positive.
    Degenerate directions (rank < 2) project to exact zeros.
    """
    _, X = _as_matrix(vectors)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 vectors to project")
    centered = X - X.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    coords = np.zeros((X.shape[0], 2))
    for axis in range(min(2, vt.shape[0])):
        if svals[axis] <= 1e-12 * max(1.0, svals[0]):
            continue
        load = vt[axis]
        if load[np.argmax(np.abs(load))] < 0:
            load = -load
        coords[:, axis] = centered @ load
    return coords


def write_cluster_report(model: ClusterModel, vectors: list[ExplanationVector],
                         path: str | Path, max_points: int = 10000,
                         seed: int = 0):
    """CSV of member id, cluster id, 2-D coordinates and per-point silhouette
    (the report is subsampled beyond max_points; clustering itself never is).
    """
    ids = list(model.member_ids)
    keep = np.arange(len(ids))
    if len(ids) > max_points:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(ids), size=max_points, replace=False))
    sub_vectors = [vectors[i] for i in keep]
    coords = project_2d(sub_vectors) if len(keep) >= 2 else np.zeros((len(keep), 2))
    sil = (silhouette_samples(vectors, model.labels)[keep]
           if model.k >= 2 else np.zeros(len(keep)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id", "cluster", "x", "y", "silhouette"])
        for row, i in enumerate(keep):
            writer.writerow([ids[i], int(model.labels[i]),
                             repr(float(coords[row, 0])),
                             repr(float(coords[row, 1])),
                             repr(float(sil[row]))])
