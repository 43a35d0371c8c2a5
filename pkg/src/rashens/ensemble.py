"""Constituent combination (voting or a stacked linear log-odds combiner)
and the agreement/risk metrics: voting ratio, Jensen-Shannon distance and
coefficient of variance; drift experiments and agreement-stratified accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASSIFICATION, Dataset, PerturbationSpec, perturb
from .explain import ExplanationVector
from .rashomon import CandidateModel
from .tree import Tree, auroc, mape

SUM_TOL = 1e-9


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon distance (base-2 logs, so the value lies in [0, 1]):
    sqrt(KL(p||m)/2 + KL(q||m)/2) with m = (p+q)/2 and 0*log0 = 0.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("p and q must share a support")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("distributions must be non-negative")
    if abs(p.sum() - 1.0) > SUM_TOL or abs(q.sum() - 1.0) > SUM_TOL:
        raise ValueError("distributions must sum to 1")
    m = 0.5 * (p + q)

    def kl(a):
        safe_a = np.where(a > 0, a, 1.0)
        safe_m = np.where(a > 0, m, 1.0)
        return float(np.where(a > 0, a * np.log2(safe_a / safe_m), 0.0).sum())

    return math.sqrt(max(0.0, 0.5 * kl(p) + 0.5 * kl(q)))


def _bernoulli_jsd_mean(p: np.ndarray, q: np.ndarray) -> float:
    """Mean JSD between per-row Bernoulli outputs of two models."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    q = np.clip(np.asarray(q, dtype=np.float64), 0.0, 1.0)
    total = np.zeros(p.shape)
    for a, b in ((p, q), (1.0 - p, 1.0 - q)):
        m = 0.5 * (a + b)
        for x in (a, b):
            safe_x = np.where(x > 0, x, 1.0)
            safe_m = np.where(x > 0, m, 1.0)
            total += 0.5 * np.where(x > 0, x * np.log2(safe_x / safe_m), 0.0)
    return float(np.sqrt(np.maximum(total, 0.0)).mean())


def model_jsd(model_a, model_b, ds: Dataset) -> float:
    """Mean per-row JSD between two models' Bernoulli predictions on ds."""
    return _bernoulli_jsd_mean(model_a.predict_batch(ds.rows),
                               model_b.predict_batch(ds.rows))


def pairwise_jsd(models: list, ds: Dataset) -> np.ndarray:
    """Symmetric matrix of mean per-row JSDs; zero diagonal."""
    if len(models) < 2:
        raise ValueError("pairwise JSD needs at least 2 models")
    preds = [m.predict_batch(ds.rows) for m in models]
    k = len(models)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            v = _bernoulli_jsd_mean(preds[i], preds[j])
            out[i, j] = v
            out[j, i] = v
    return out


def mean_pairwise_jsd(models: list, ds: Dataset) -> float:
    mat = pairwise_jsd(models, ds)
    k = mat.shape[0]
    return float(mat[np.triu_indices(k, 1)].mean())


@dataclass(frozen=True)
class AgreementReport:
    outputs: np.ndarray          # raw constituent outputs for the row
    voting_ratio: float | None   # classification only
    c_v: float | None            # regression only
    mean_jsd: float | None       # classification only


@dataclass
class Ensemble:
    constituents: list[CandidateModel]
    task: str
    combiner: str = "voting"     # "voting" | "stacking"
    weights: np.ndarray | None = None
    intercept: float = 0.0
    vote_threshold: float = 0.5

    def __post_init__(self):
        if not self.constituents:
            raise ValueError("an ensemble needs at least one constituent")
        if self.combiner not in ("voting", "stacking"):
            raise ValueError(f"unknown combiner: {self.combiner}")
        if self.combiner == "stacking":
            if self.task != CLASSIFICATION:
                raise ValueError("stacking is classification-only")
            if self.weights is None or len(self.weights) != len(self.constituents):
                raise ValueError("stacking weights must match constituents")

    @property
    def trees(self) -> list[Tree]:
        return [c.tree for c in self.constituents]

    def constituent_outputs(self, X: np.ndarray) -> np.ndarray:
        return np.stack([t.predict_batch(X) for t in self.trees], axis=1)

    def voting_ratios(self, X: np.ndarray) -> np.ndarray:
        outputs = self.constituent_outputs(X)
        return (outputs >= self.vote_threshold).mean(axis=1)

    def predict_batch(self, X: np.ndarray) -> np.ndarray:
        outputs = self.constituent_outputs(X)
        if self.task != CLASSIFICATION:
            return outputs.mean(axis=1)
        if self.combiner == "voting":
            return (outputs >= self.vote_threshold).mean(axis=1)
        z = outputs @ self.weights + self.intercept
        return 1.0 / (1.0 + np.exp(-z))

    def to_dict(self) -> dict:
        doc = {
            "task": self.task,
            "combiner": self.combiner,
            "vote_threshold": self.vote_threshold,
            "intercept": float(self.intercept),
            "weights": ([float(w) for w in self.weights]
                        if self.weights is not None else None),
            "constituents": [
                {"id": c.id, "val_loss": c.val_loss,
                 "subset": list(c.subset.indices),
                 "tree": c.tree.to_dict(),
                 "explanation": ([float(v) for v in c.explanation.e]
                                 if c.explanation is not None else None)}
                for c in self.constituents],
        }
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "Ensemble":
        from .tree import FeatureSubset
        constituents = []
        for c in doc["constituents"]:
            tree = Tree.from_dict(c["tree"])
            expl = (ExplanationVector(e=np.asarray(c["explanation"]),
                                      model_id=c["id"])
                    if c.get("explanation") is not None else None)
            constituents.append(CandidateModel(
                id=c["id"], subset=FeatureSubset(tuple(c["subset"])),
                tree=tree, val_loss=float(c["val_loss"]), explanation=expl))
        weights = doc.get("weights")
        return Ensemble(
            constituents=constituents, task=doc["task"],
            combiner=doc["combiner"],
            weights=np.asarray(weights) if weights is not None else None,
            intercept=float(doc.get("intercept", 0.0)),
            vote_threshold=float(doc.get("vote_threshold", 0.5)))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True,
                                         indent=2))

    @staticmethod
    def load(path: str | Path) -> "Ensemble":
        return Ensemble.from_dict(json.loads(Path(path).read_text()))


def predict_voting(e: Ensemble, row: np.ndarray
                   ) -> tuple[float, AgreementReport]:
    """Vote-fraction prediction plus the agreement report for one row.

    Classification: each constituent votes its thresholded class and the
    returned probability is the positive-vote fraction. Regression: the
    prediction is the output mean and c_v = population std / mean.
    """
    row = np.asarray(row, dtype=np.float64)
    outputs = e.constituent_outputs(row[None, :])[0]
    if e.task == CLASSIFICATION:
        ratio = float((outputs >= e.vote_threshold).mean())
        k = outputs.size
        if k >= 2:
            mj = float(np.mean([_bernoulli_jsd_mean(outputs[i:i + 1],
                                                    outputs[j:j + 1])
                                for i in range(k) for j in range(i + 1, k)]))
        else:
            mj = 0.0
        return ratio, AgreementReport(outputs=outputs, voting_ratio=ratio,
                                      c_v=None, mean_jsd=mj)
    mu = float(outputs.mean())
    if abs(mu) < 1e-12:
        raise ValueError("coefficient of variance undefined: mean ~ 0")
    c_v = float(outputs.std() / mu)
    return mu, AgreementReport(outputs=outputs, voting_ratio=None, c_v=c_v,
                               mean_jsd=None)


def fit_stacking(constituents: list[CandidateModel], train: Dataset,
                 seed: int) -> Ensemble:
    """Stacked linear log-odds combiner fit by full-batch gradient descent on
    out-of-fold constituent outputs (5 stratified folds, 500 iterations,
    L2 1e-3 on the weights). Constituents keep their full-train trees.
    """
    from .tree import fit_tree
    if train.task != CLASSIFICATION:
        raise ValueError("stacking is classification-only")
    if not constituents:
        raise ValueError("no constituents")
    n = train.n_rows
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=np.int64)
    for cls in (0.0, 1.0):
        members = np.flatnonzero(train.labels == cls)
        perm = rng.permutation(members.size)
        folds[members[perm]] = np.arange(members.size) % 5

    P = np.zeros((n, len(constituents)))
    for f in range(5):
        hold = folds == f
        keep = ~hold
        sub_train = train.take(np.flatnonzero(keep))
        if len(np.unique(sub_train.labels)) < 2:
            raise ValueError(f"fold {f} leaves a single class for training")
        if not hold.any():
            continue
        X_hold = train.rows[hold]
        for j, c in enumerate(constituents):
            refit = fit_tree(sub_train, c.subset, c.tree.params,
                             seed=c.tree.seed)
            P[hold, j] = refit.predict_batch(X_hold)

    y = train.labels
    k = len(constituents)
    w = np.zeros(k)
    pbar = min(max(float(y.mean()), 1e-6), 1.0 - 1e-6)
    b = math.log(pbar / (1.0 - pbar))
    lr = 4.0 / (k + 2.0)
    penalty = 1e-3
    for _ in range(500):
        z = P @ w + b
        s = 1.0 / (1.0 + np.exp(-z))
        grad_w = P.T @ (s - y) / n + 2.0 * penalty * w
        grad_b = float((s - y).mean())
        w -= lr * grad_w
        b -= lr * grad_b
    return Ensemble(constituents=constituents, task=train.task,
                    combiner="stacking", weights=w, intercept=b)


def risk_stratify(e: Ensemble, ds: Dataset, bins: int) -> list[dict]:
    """Bucket rows by majority agreement max(vr, 1-vr) into equal-width bins
    over [0.5, 1]; report majority-vote accuracy per bucket. Boundary rows at
    exactly 0.5 land in the lowest bucket.
    """
    if e.combiner != "voting" or e.task != CLASSIFICATION:
        raise ValueError("risk stratification needs a voting classifier")
    if ds.n_rows == 0:
        raise ValueError("empty dataset")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    vr = e.voting_ratios(ds.rows)
    agreement = np.maximum(vr, 1.0 - vr)
    width = 0.5 / bins
    idx = np.minimum(((agreement - 0.5) / width).astype(int), bins - 1)
    majority = vr >= 0.5
    correct = majority == (ds.labels == 1.0)
    out = []
    for bucket in range(bins):
        mask = idx == bucket
        cnt = int(mask.sum())
        out.append({
            "bucket_low": 0.5 + bucket * width,
            "bucket_high": 0.5 + (bucket + 1) * width,
            "count": cnt,
            "accuracy": float(correct[mask].mean()) if cnt else None,
        })
    return out


@dataclass
class DriftReport:
    kind: str
    repeats: int
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "repeats": self.repeats, "rows": self.rows}

    def write_json(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True,
                                         indent=2))

    def write_csv(self, path: str | Path):
        with open(path, "w") as fh:
            fh.write("level,loss,mean_pairwise_jsd,mean_agreement\n")
            for r in self.rows:
                fh.write(f"{r['level']!r},{r['loss']!r},"
                         f"{r['mean_pairwise_jsd']!r},"
                         f"{r['mean_agreement']!r}\n")

    def write_gnuplot(self, path: str | Path):
        with open(path, "w") as fh:
            fh.write("# level loss mean_pairwise_jsd mean_agreement\n")
            for r in self.rows:
                fh.write(f"{r['level']!r} {r['loss']!r} "
                         f"{r['mean_pairwise_jsd']!r} "
                         f"{r['mean_agreement']!r}\n")


def _ensemble_loss(e: Ensemble, ds: Dataset) -> float:
    preds = e.predict_batch(ds.rows)
    if ds.task == CLASSIFICATION:
        return 1.0 - auroc(preds, ds.labels)
    return mape(preds, ds.labels)


def _drift_metrics(e: Ensemble, ds: Dataset) -> tuple[float, float, float]:
    lo = _ensemble_loss(e, ds)
    if e.task == CLASSIFICATION:
        mj = (mean_pairwise_jsd(e.trees, ds) if len(e.trees) >= 2 else 0.0)
        vr = e.voting_ratios(ds.rows)
        agree = float(np.maximum(vr, 1.0 - vr).mean())
    else:
        outputs = e.constituent_outputs(ds.rows)
        mj = 0.0
        mu = outputs.mean(axis=1)
        if (np.abs(mu) < 1e-12).any():
            raise ValueError("coefficient of variance undefined: mean ~ 0")
        agree = float((outputs.std(axis=1) / np.abs(mu)).mean())
    return lo, mj, agree


def drift_experiment(e: Ensemble, test: Dataset, levels: list[float],
                     kind: str = "gaussian", seed: int = 0,
                     repeats: int = 30) -> DriftReport:
    """Per level: perturb the held-out data, evaluate ensemble loss, mean
    pairwise constituent JSD and mean agreement; seeded repeats are averaged.
    A zero level short-circuits to the clean evaluation (bit-exact).
    """
    if list(levels) != sorted(set(levels)):
        raise ValueError("levels must be strictly increasing")
    report = DriftReport(kind=kind, repeats=repeats)
    for li, level in enumerate(levels):
        if level == 0.0:
            lo, mj, agree = _drift_metrics(e, test)
        else:
            acc = np.zeros(3)
            for rep in range(repeats):
                pseed = int(np.random.SeedSequence(
                    entropy=seed, spawn_key=(li, rep)).generate_state(1)[0])
                spec = (PerturbationSpec(kind="gaussian", sigma2=level,
                                         seed=pseed)
                        if kind == "gaussian" else
                        PerturbationSpec(kind="shuffle", fraction=level,
                                         seed=pseed))
                acc += np.array(_drift_metrics(e, perturb(test, spec)))
            lo, mj, agree = (acc / repeats).tolist()
        report.rows.append({"level": float(level), "loss": lo,
                            "mean_pairwise_jsd": mj, "mean_agreement": agree})
    return report


def similarity_report(e: Ensemble, reference, ds: Dataset,
                      reference_explanation: ExplanationVector | None = None
                      ) -> dict:
    """Jaccard overlap of positive predictions plus cosine similarity between
    the ensemble's mean constituent explanation vector and the reference's.
    """
    if ds.task != CLASSIFICATION:
        raise ValueError("similarity report is classification-only")
    e_pos = e.predict_batch(ds.rows) >= 0.5
    r_pos = reference.predict_batch(ds.rows) >= 0.5
    union = int((e_pos | r_pos).sum())
    inter = int((e_pos & r_pos).sum())
    jaccard = 1.0 if union == 0 else inter / union

    shap_cos = None
    if reference_explanation is not None:
        mean_vec = np.mean([c.explanation.e for c in e.constituents
                            if c.explanation is not None], axis=0)
        ref_vec = reference_explanation.e
        na = float(np.linalg.norm(mean_vec))
        nb = float(np.linalg.norm(ref_vec))
        if na == 0.0 and nb == 0.0:
            shap_cos = 1.0
        elif na == 0.0 or nb == 0.0:
            shap_cos = 0.0
        else:
            shap_cos = float(mean_vec @ ref_vec / (na * nb))
    return {"jaccard": float(jaccard), "shap_cosine": shap_cos}
