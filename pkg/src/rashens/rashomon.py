"""Candidate sampling over the feature-subset space, required-sample-size
math, and Rashomon set construction against a reference model.

Classification membership uses loss = 1 - AUROC on the validation split;
regression uses MAPE. The reference is either the all-features tree fitted on
the training split or an externally supplied loss threshold; a DeLong-style
statistical-closeness mode is available for classification.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CLASSIFICATION, Dataset
from .explain import ExplanationVector, background_sample, explanation_vector
from .tree import FeatureSubset, Tree, TreeParams, auroc, fit_tree, loss, mape


@dataclass(frozen=True)
class SamplingPlan:
    F: int
    K_size: int
    S_max: int
    alpha: float
    n_models: int
    seed: int
    stratified_sizes: bool = False

    def __post_init__(self):
        if not 1 <= self.K_size <= self.S_max <= self.F:
            raise ValueError("need 1 <= K_size <= S_max <= F")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")

    def to_dict(self) -> dict:
        return {"F": self.F, "K_size": self.K_size, "S_max": self.S_max,
                "alpha": self.alpha, "n_models": self.n_models,
                "seed": self.seed, "stratified_sizes": self.stratified_sizes}


@dataclass(frozen=True)
class ReferenceSpec:
    """How the loss band is anchored.

    mode "all-features": reference loss from the tree on every feature.
    mode "threshold":    externally supplied loss value.
    mode "delong":       all-features reference, membership by a one-sided
                         DeLong AUROC comparison at the given p-value.
    """
    mode: str = "all-features"
    value: float | None = None
    p_value: float = 0.05

    def __post_init__(self):
        if self.mode not in ("all-features", "threshold", "delong"):
            raise ValueError(f"unknown reference mode: {self.mode}")
        if self.mode == "threshold" and self.value is None:
            raise ValueError("threshold reference needs a loss value")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value,
                "p_value": self.p_value}


@dataclass
class CandidateModel:
    id: str
    subset: FeatureSubset
    tree: Tree
    val_loss: float
    explanation: ExplanationVector | None = None


@dataclass
class RashomonSet:
    ref_loss: float
    epsilon: float
    members: list[CandidateModel]
    n_sampled: int
    task: str
    ref_tree: Tree | None = None
    plan: SamplingPlan | None = None
    ref_mode: str = "all-features"

    def member_ids(self) -> list[str]:
        return [m.id for m in self.members]

    def explanation_matrix(self) -> np.ndarray:
        return np.stack([m.explanation.e for m in self.members])


def _log_choose(n: int, k: int) -> float:
    if k < 0 or k > n:
        return -math.inf
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1))


def _log_sum_exp(logs: list[float]) -> float:
    hi = max(logs)
    if hi == -math.inf:
        return -math.inf
    return hi + math.log(sum(math.exp(v - hi) for v in logs))


def subset_inclusion_probability(F: int, K_size: int, S_max: int) -> float:
    """Probability that a uniformly drawn subset of size K..S_max contains a
    fixed K-sized key set: sum_s C(F-K, s-K) / sum_s C(F, s), via
    overflow-safe log-binomials.
    """
    if K_size == 0:
        return 1.0
    if not 0 <= K_size <= S_max <= F:
        raise ValueError("need 0 <= K_size <= S_max <= F")
    num = [_log_choose(F - K_size, s - K_size) for s in range(K_size, S_max + 1)]
    den = [_log_choose(F, s) for s in range(K_size, S_max + 1)]
    return float(math.exp(_log_sum_exp(num) - _log_sum_exp(den)))


def required_sample_size(F: int, K_size: int, S_max: int, alpha: float) -> int:
    """Samples needed so a K-sized key subset is covered with confidence
    alpha: ceil(ln(1-alpha) / ln(1-P_K)). P_K = 1 returns 1 by convention;
    P_K = 0 is unreachable and raises.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    p = subset_inclusion_probability(F, K_size, S_max)
    if p >= 1.0:
        return 1
    if p <= 0.0:
        raise ValueError("subspace unreachable: inclusion probability is 0")
    eta = math.log(1.0 - alpha) / math.log1p(-p)
    return max(1, math.ceil(eta))


def sample_candidates(plan: SamplingPlan) -> list[FeatureSubset]:
    """Draw n_models subsets: size uniform on [K_size, S_max] (or round-robin
    over sizes when stratified), then features uniform without replacement.
    Subset-level duplicates are allowed.
    """
    rng = np.random.default_rng(plan.seed)
    n_sizes = plan.S_max - plan.K_size + 1
    subsets = []
    for i in range(plan.n_models):
        if plan.stratified_sizes:
            s = plan.K_size + i % n_sizes
        else:
            s = int(rng.integers(plan.K_size, plan.S_max + 1))
        idx = rng.choice(plan.F, size=s, replace=False)
        subsets.append(FeatureSubset(tuple(int(j) for j in idx)))
    return subsets


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def delong_worse_pvalue(scores_cand: np.ndarray, scores_ref: np.ndarray,
                        labels: np.ndarray) -> float:
    """One-sided DeLong p-value for H1: AUROC(cand) < AUROC(ref) on paired
    scores. Small p = strong evidence the candidate is worse.
    """
    labels = np.asarray(labels, dtype=np.float64)
    pos = labels == 1.0
    neg = labels == 0.0
    m, n = int(pos.sum()), int(neg.sum())
    if m == 0 or n == 0:
        raise ValueError("DeLong needs both classes present")

    def placements(scores):
        sp = scores[pos][:, None]
        sn = scores[neg][None, :]
        cmp = (sp > sn).astype(np.float64) + 0.5 * (sp == sn)
        return cmp.mean(axis=1), 1.0 - cmp.mean(axis=0), cmp.mean()

    v10_c, v01_c, auc_c = placements(np.asarray(scores_cand, dtype=np.float64))
    v10_r, v01_r, auc_r = placements(np.asarray(scores_ref, dtype=np.float64))
    v10 = np.stack([v10_c, v10_r])
    v01 = np.stack([v01_c, v01_r])
    s10 = np.cov(v10) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(v01) if n > 1 else np.zeros((2, 2))
    s = s10 / m + s01 / n
    var = float(s[0, 0] + s[1, 1] - 2.0 * s[0, 1])
    diff = float(auc_r - auc_c)
    if var <= 0.0:
        return 0.0 if diff > 0.0 else 1.0
    return _normal_sf(diff / math.sqrt(var))


def build_rashomon_set(candidates: list[FeatureSubset], train: Dataset,
                       val: Dataset, params: TreeParams,
                       ref: ReferenceSpec | None = None,
                       epsilon: float = 0.0,
                       plan: SamplingPlan | None = None,
                       seed: int = 0) -> RashomonSet:
    """Train every candidate on `train`, evaluate loss on `val`, retain those
    within the epsilon band of the reference, and attach explanation vectors
    to members only. An empty result is reported, not fatal.
    """
    if not candidates:
        raise ValueError("no candidates to evaluate")
    ref = ref or ReferenceSpec()
    ref_tree = None
    ref_scores = None
    if ref.mode in ("all-features", "delong"):
        full = FeatureSubset(tuple(range(train.d)))
        ref_tree = fit_tree(train, full, params, seed=seed)
        ref_loss = loss(ref_tree, val)
        if ref.mode == "delong":
            if train.task != CLASSIFICATION:
                raise ValueError("delong mode is classification-only")
            ref_scores = ref_tree.predict_batch(val.rows)
    else:
        ref_loss = float(ref.value)

    background = background_sample(train, seed=seed)
    cache: dict[tuple[int, ...], tuple[Tree, float, np.ndarray]] = {}
    members = []
    for i, subset in enumerate(candidates):
        key = subset.indices
        if key in cache:
            tree, val_loss, preds = cache[key]
        else:
            tree = fit_tree(train, subset, params, seed=seed)
            preds = tree.predict_batch(val.rows)
            if train.task == CLASSIFICATION:
                val_loss = 1.0 - auroc(preds, val.labels)
            else:
                val_loss = mape(preds, val.labels)
            cache[key] = (tree, val_loss, preds)
        if ref.mode == "delong":
            inside = delong_worse_pvalue(preds, ref_scores,
                                         val.labels) > ref.p_value
        else:
            inside = val_loss <= ref_loss + epsilon
        if inside:
            model_id = f"m{i:06d}"
            vec = explanation_vector(tree, val, background, model_id=model_id)
            members.append(CandidateModel(id=model_id, subset=subset,
                                          tree=tree, val_loss=val_loss,
                                          explanation=vec))
    return RashomonSet(ref_loss=ref_loss, epsilon=epsilon, members=members,
                       n_sampled=len(candidates), task=train.task,
                       ref_tree=ref_tree, plan=plan, ref_mode=ref.mode)


def rashomon_ratio(rset: RashomonSet) -> float:
    if rset.n_sampled <= 0:
        raise ValueError("no candidates were sampled")
    return len(rset.members) / rset.n_sampled


def save_rashomon(rset: RashomonSet, out_dir: str | Path,
                  feature_names: tuple[str, ...] | None = None):
    """Persist manifest.json, models/<id>.json and explanations.csv."""
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    manifest = {
        "plan": rset.plan.to_dict() if rset.plan else None,
        "ref_loss": rset.ref_loss,
        "ref_mode": rset.ref_mode,
        "epsilon": rset.epsilon,
        "n_sampled": rset.n_sampled,
        "n_members": len(rset.members),
        "ratio": rashomon_ratio(rset),
        "task": rset.task,
        "member_ids": rset.member_ids(),
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2))
    if rset.ref_tree is not None:
        rset.ref_tree.save(out / "models" / "reference.json")
    for m in rset.members:
        doc = m.tree.to_dict()
        doc["val_loss"] = m.val_loss
        doc["id"] = m.id
        (out / "models" / f"{m.id}.json").write_text(
            json.dumps(doc, sort_keys=True))
    d = rset.members[0].explanation.e.size if rset.members else 0
    header = list(feature_names) if feature_names else [
        f"f{j}" for j in range(d)]
    with open(out / "explanations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id"] + header)
        for m in rset.members:
            writer.writerow([m.id] + [repr(float(v)) for v in m.explanation.e])


def load_rashomon(out_dir: str | Path) -> RashomonSet:
    """Rehydrate a persisted Rashomon set bit-exactly."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    vectors: dict[str, np.ndarray] = {}
    with open(out / "explanations.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            vectors[row[0]] = np.array([float(v) for v in row[1:]])
    members = []
    for mid in manifest["member_ids"]:
        doc = json.loads((out / "models" / f"{mid}.json").read_text())
        tree = Tree.from_dict(doc)
        members.append(CandidateModel(
            id=mid, subset=tree.subset, tree=tree,
            val_loss=float(doc["val_loss"]),
            explanation=ExplanationVector(e=vectors[mid], model_id=mid)))
    ref_path = out / "models" / "reference.json"
    ref_tree = Tree.load(ref_path) if ref_path.exists() else None
    plan = (SamplingPlan(**manifest["plan"]) if manifest.get("plan")
            else None)
    return RashomonSet(ref_loss=float(manifest["ref_loss"]),
                       epsilon=float(manifest["epsilon"]),
                       members=members, n_sampled=int(manifest["n_sampled"]),
                       task=manifest["task"], ref_tree=ref_tree, plan=plan,
                       ref_mode=manifest.get("ref_mode", "all-features"))
