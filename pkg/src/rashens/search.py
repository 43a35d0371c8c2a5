"""Per-cluster constituent optimization: best-first traversal of the
feature-addition DAG seeded at the clusteroid, scored by validation
performance plus prediction divergence from the other clusters'
representatives, and constrained to stay inside the home cluster and the
Rashomon band.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import ClusterModel
from .data import CLASSIFICATION, Dataset
from .ensemble import Ensemble, model_jsd
from .explain import ExplanationVector, background_sample, explanation_vector
from .rashomon import CandidateModel, RashomonSet
from .tree import FeatureSubset, Tree, auroc, fit_tree, mape

FRONTIER_CAP = 10000


@dataclass(frozen=True)
class SearchBudget:
    m: int                     # maximum subset size reachable by the search
    max_expansions: int = 50
    lam: float = 0.25          # weight of the divergence term

    def __post_init__(self):
        if self.max_expansions < 0:
            raise ValueError("max_expansions must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.m < 1:
            raise ValueError("m must be >= 1")

    def to_dict(self) -> dict:
        return {"m": self.m, "max_expansions": self.max_expansions,
                "lam": self.lam}


@dataclass
class SearchNode:
    subset: FeatureSubset
    tree: Tree
    score: float
    val_loss: float
    explanation: ExplanationVector
    inside_cluster: bool


def expand(subset: FeatureSubset, d: int) -> list[FeatureSubset]:
    """All subsets formed by adding exactly one absent feature, ordered by
    the added feature's index."""
    present = set(subset.indices)
    return [subset.with_feature(j) for j in range(d) if j not in present]


def membership_check(candidate: ExplanationVector, clusters: ClusterModel,
                     home: int) -> bool:
    """True iff the home centroid is the nearest (Euclidean); exact ties are
    resolved in favor of the lowest cluster id, so a tie with home counts as
    inside only when home has the lowest id among the tied centroids.
    """
    dists = np.linalg.norm(clusters.centroids - candidate.e, axis=1)
    best = dists.min()
    tied = np.flatnonzero(dists == best)
    return int(tied[0]) == home


def node_score(tree: Tree, val: Dataset, others: list[Tree], lam: float
               ) -> float:
    """(1 - lambda) * performance + lambda * mean divergence from the other
    clusters' representatives. Performance is AUROC (classification) or
    1 - MAPE (regression); divergence is mean JSD, or a normalized mean
    absolute prediction distance for regression.
    """
    preds = tree.predict_batch(val.rows)
    if val.task == CLASSIFICATION:
        perf = auroc(preds, val.labels)
        if others:
            div = float(np.mean([model_jsd(tree, o, val) for o in others]))
        else:
            div = 0.0
    else:
        perf = 1.0 - mape(preds, val.labels)
        if others:
            scale = float(np.abs(val.labels).mean())
            dists = [min(1.0, float(np.abs(preds - o.predict_batch(val.rows))
                                    .mean() / scale)) for o in others]
            div = float(np.mean(dists))
        else:
            div = 0.0
    return (1.0 - lam) * perf + lam * div


def _ensemble_substitution_score(tree: Tree, val: Dataset,
                                 others: list[CandidateModel]) -> float:
    """Algorithm-1 style objective: negative loss of the full ensemble with
    this candidate substituted for its cluster's representative."""
    stand_in = CandidateModel(id="search", subset=tree.subset, tree=tree,
                              val_loss=0.0)
    ens = Ensemble(constituents=others + [stand_in], task=val.task)
    preds = ens.predict_batch(val.rows)
    if val.task == CLASSIFICATION:
        return auroc(preds, val.labels)
    return 1.0 - mape(preds, val.labels)


class SearchTrace:
    """JSONL audit log of visited subsets, scores and rejection reasons."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._rows: list[dict] = []

    def log(self, event: str, subset: FeatureSubset, **extra):
        if self.path is None:
            return
        row = {"event": event, "subset": list(subset.indices)}
        row.update(extra)
        self._rows.append(row)

    def flush(self):
        if self.path is None:
            return
        with open(self.path, "w") as fh:
            for row in self._rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def search_constituent(home: int, clusters: ClusterModel, rset: RashomonSet,
                       train: Dataset, val: Dataset, budget: SearchBudget,
                       trace_path: str | Path | None = None,
                       ensemble_loss: bool = False,
                       barred_features: set[int] | None = None,
                       excluded_member_ids: set[str] | None = None
                       ) -> CandidateModel:
    """Best-first search seeded at the home cluster's clusteroid.

    Children are rejected when they leave the Rashomon band, fall into
    another cluster, exceed the width budget, or touch a barred feature.
    Returns the best-scoring node visited (the clusteroid itself if nothing
    improves). Deterministic: the frontier orders by score with
    subset-lexicographic tie-breaking.
    """
    barred = barred_features or set()
    excluded = excluded_member_ids or set()
    members = {m.id: m for m in rset.members}
    home_ids = [mid for mid in clusters.members_of(home) if mid in members
                and mid not in excluded]
    if not home_ids:
        raise ValueError(f"cluster {home} has no eligible members")

    clusteroid_id = clusters.clusteroid_ids[home]
    if clusteroid_id not in home_ids:
        # vetoed or missing clusteroid: seed at the nearest eligible member
        centroid = clusters.centroids[home]
        ranked = sorted(
            (float(np.linalg.norm(members[mid].explanation.e - centroid)), mid)
            for mid in home_ids)
        clusteroid_id = ranked[0][1]
    seed_member = members[clusteroid_id]
    if any(j in barred for j in seed_member.subset.indices):
        eligible = [mid for mid in home_ids
                    if not any(j in barred
                               for j in members[mid].subset.indices)]
        if not eligible:
            raise ValueError(
                f"cluster {home}: every member uses a barred feature")
        centroid = clusters.centroids[home]
        ranked = sorted(
            (float(np.linalg.norm(members[mid].explanation.e - centroid)), mid)
            for mid in eligible)
        seed_member = members[ranked[0][1]]

    others = [members[clusters.clusteroid_ids[c]]
              for c in range(clusters.k)
              if c != home and clusters.clusteroid_ids[c] in members]
    other_trees = [m.tree for m in others]

    background = background_sample(train, seed=seed_member.tree.seed)
    band = rset.ref_loss + effective_epsilon(rset)
    trace = SearchTrace(trace_path)

    def score_of(tree: Tree) -> float:
        if ensemble_loss:
            return _ensemble_substitution_score(tree, val, others)
        return node_score(tree, val, other_trees, budget.lam)

    seed_node = SearchNode(
        subset=seed_member.subset, tree=seed_member.tree,
        score=score_of(seed_member.tree), val_loss=seed_member.val_loss,
        explanation=seed_member.explanation, inside_cluster=True)
    trace.log("seed", seed_node.subset, score=seed_node.score,
              member=seed_member.id)

    best = seed_node
    visited = {seed_node.subset.indices}
    frontier: list[tuple[float, tuple[int, ...], SearchNode]] = []
    heapq.heappush(frontier, (-seed_node.score, seed_node.subset.indices,
                              seed_node))
    expansions = 0

    while frontier and expansions < budget.max_expansions:
        _, _, node = heapq.heappop(frontier)
        expansions += 1
        trace.log("expand", node.subset, score=node.score)
        for child_subset in expand(node.subset, train.d):
            key = child_subset.indices
            if key in visited:
                continue
            visited.add(key)
            added = (set(child_subset.indices) - set(node.subset.indices)).pop()
            if added in barred:
                trace.log("reject", child_subset, reason="barred feature")
                continue
            if child_subset.size > budget.m:
                trace.log("reject", child_subset, reason="width budget")
                continue
            tree = fit_tree(train, child_subset, seed_member.tree.params,
                            seed=seed_member.tree.seed)
            preds = tree.predict_batch(val.rows)
            if val.task == CLASSIFICATION:
                val_loss = 1.0 - auroc(preds, val.labels)
            else:
                val_loss = mape(preds, val.labels)
            if val_loss > band:
                trace.log("reject", child_subset, reason="outside band",
                          val_loss=val_loss)
                continue
            vec = explanation_vector(tree, val, background)
            if not membership_check(vec, clusters, home):
                trace.log("reject", child_subset, reason="outside cluster")
                continue
            score = score_of(tree)
            child = SearchNode(subset=child_subset, tree=tree, score=score,
                               val_loss=val_loss, explanation=vec,
                               inside_cluster=True)
            trace.log("accept", child_subset, score=score, val_loss=val_loss)
            if score > best.score:
                best = child
            heapq.heappush(frontier, (-score, key, child))
            if len(frontier) > FRONTIER_CAP:
                worst = max(range(len(frontier)),
                            key=lambda i: (frontier[i][0], frontier[i][1]))
                frontier.pop(worst)
                heapq.heapify(frontier)
    trace.log("result", best.subset, score=best.score)
    trace.flush()

    if best.subset.indices == seed_member.subset.indices:
        return seed_member
    return CandidateModel(
        id=f"c{home}.opt", subset=best.subset, tree=best.tree,
        val_loss=best.val_loss,
        explanation=ExplanationVector(e=best.explanation.e,
                                      model_id=f"c{home}.opt"))


def effective_epsilon(rset: RashomonSet) -> float:
    """Band width the searches must respect. For statistically built sets the
    loosest admitted member defines it; otherwise it is the set's epsilon."""
    if rset.ref_mode == "delong" and rset.members:
        worst = max(m.val_loss for m in rset.members)
        return max(rset.epsilon, worst - rset.ref_loss)
    return rset.epsilon
