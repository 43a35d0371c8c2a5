"""End-to-end orchestration: sample -> filter -> cluster -> search ->
ensemble -> drift/report, with every stage persisted and reproducible from
the config and its explicit seeds alone.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cluster import ClusterModel, select_k, write_cluster_report
from .data import (CLASSIFICATION, Dataset, load_csv, save_csv, split,
                   standardize)
from .ensemble import (Ensemble, drift_experiment, fit_stacking,
                       mean_pairwise_jsd, risk_stratify, similarity_report)
from .explain import ExplanationVector, background_sample, explanation_vector
from .rashomon import (RashomonSet, ReferenceSpec, SamplingPlan,
                       build_rashomon_set, rashomon_ratio, sample_candidates,
                       save_rashomon)
from .search import SearchBudget, search_constituent
from .tree import evaluate


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


DEFAULT_DRIFT_LEVELS = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0)


@dataclass
class RunConfig:
    dataset: str
    target: str
    task: str
    out_dir: str
    seed: int
    data_seed: int | None = None      # split seeds; defaults to `seed`
    train_fraction: float = 0.8
    val_fraction: float = 0.8
    n_models: int = 2000
    k_subset: int = 1
    s_max: int | None = None          # default: min(10, d)
    alpha: float = 0.95
    stratified_sizes: bool = False
    max_depth: int = 8
    min_samples_leaf: int = 5
    epsilon: float = 0.0
    ref_mode: str = "all-features"
    ref_value: float | None = None
    k_min: int = 2
    k_max: int | None = None          # default: min(25, floor(sqrt(members)))
    search_m: int | None = None       # default: s_max
    max_expansions: int = 50
    lam: float = 0.25
    ensemble_loss_search: bool = False
    combiner: str = "voting"
    vote_threshold: float = 0.5
    drift_levels: tuple[float, ...] = DEFAULT_DRIFT_LEVELS
    drift_kind: str = "gaussian"
    drift_repeats: int = 30
    risk_bins: int = 5

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["drift_levels"] = list(self.drift_levels)
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        doc = dict(doc)
        if "drift_levels" in doc:
            doc["drift_levels"] = tuple(doc["drift_levels"])
        return RunConfig(**doc)

    @staticmethod
    def from_json(path: str | Path) -> "RunConfig":
        return RunConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RunManifest:
    doc: dict

    def __getitem__(self, key):
        return self.doc[key]

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2)

    @staticmethod
    def load(path: str | Path) -> "RunManifest":
        return RunManifest(json.loads(Path(path).read_text()))


@dataclass
class PipelineResult:
    """In-memory view of a finished run (what ablation reruns consume)."""
    manifest: RunManifest
    config: RunConfig
    train: Dataset
    val: Dataset
    test: Dataset
    rset: RashomonSet
    clusters: ClusterModel | None
    ensemble: Ensemble
    voting_ensemble: Ensemble
    reference_explanation: ExplanationVector


def derive_seed(master: int, *key) -> int:
    return int(np.random.SeedSequence(entropy=master,
                                      spawn_key=tuple(key)).generate_state(1)[0])


def _stage_seeds(master: int, data_master: int | None = None) -> dict:
    """Per-stage seeds. Split seeds derive from data_master so ablation can
    rerun the method's stochastic stages on identical data partitions."""
    names = ["split", "subsplit", "plan", "fit", "cluster", "stacking",
             "drift", "report", "ablation"]
    seeds = {name: derive_seed(master, i) for i, name in enumerate(names)}
    if data_master is not None and data_master != master:
        seeds["split"] = derive_seed(data_master, 0)
        seeds["subsplit"] = derive_seed(data_master, 1)
    return seeds


def mean_constituent_explanation(e: Ensemble) -> ExplanationVector:
    vecs = [c.explanation.e for c in e.constituents
            if c.explanation is not None]
    return ExplanationVector(e=np.mean(vecs, axis=0), model_id="ensemble")


def run_pipeline(config: RunConfig, persist: bool = True) -> PipelineResult:
    """Execute the seven pipeline steps in order; idempotent for a fixed
    config. Raises StageError with the failing stage's name; the manifest is
    only written when every stage completed.
    """
    timings: dict[str, float] = {}
    seeds = _stage_seeds(config.seed, config.data_seed)
    out = Path(config.out_dir)

    def timed(stage):
        class _T:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()

            def __exit__(self_inner, exc_type, exc, tb):
                timings[stage] = time.perf_counter() - self_inner.t0
                return False
        return _T()

    # 1. ingest
    with timed("load"):
        try:
            ds = load_csv(config.dataset, config.target, config.task)
        except (OSError, ValueError) as err:
            raise StageError("load", str(err)) from err

    # 2. split into train / val / test
    with timed("split"):
        try:
            train_full, test = split(ds, config.train_fraction, seeds["split"])
            train, val = split(train_full, config.val_fraction,
                               seeds["subsplit"])
        except ValueError as err:
            raise StageError("split", str(err)) from err

    # 3. standardize on the training statistics
    with timed("standardize"):
        (train, val, test), scaler = standardize(train, [val, test])

    if persist:
        (out / "data").mkdir(parents=True, exist_ok=True)
        save_csv(train, out / "data" / "train.csv", target_name=config.target)
        save_csv(val, out / "data" / "val.csv", target_name=config.target)
        save_csv(test, out / "data" / "test.csv", target_name=config.target)
        (out / "data" / "scaler.json").write_text(
            json.dumps(scaler.to_dict(), sort_keys=True))

    # 4. sample candidate subsets
    with timed("sample"):
        s_max = config.s_max if config.s_max is not None else min(10, ds.d)
        try:
            plan = SamplingPlan(F=ds.d, K_size=config.k_subset, S_max=s_max,
                                alpha=config.alpha, n_models=config.n_models,
                                seed=seeds["plan"],
                                stratified_sizes=config.stratified_sizes)
        except ValueError as err:
            raise StageError("sample", str(err)) from err
        candidates = sample_candidates(plan)

    # 5. build the Rashomon set
    with timed("rashomon"):
        from .tree import TreeParams
        params = TreeParams(max_depth=config.max_depth,
                            min_samples_leaf=config.min_samples_leaf)
        ref = ReferenceSpec(mode=config.ref_mode, value=config.ref_value)
        rset = build_rashomon_set(candidates, train, val, params, ref,
                                  config.epsilon, plan=plan,
                                  seed=seeds["fit"])
    if persist:
        save_rashomon(rset, out / "rashomon", feature_names=ds.schema.names)
    ratio = rashomon_ratio(rset)
    if not rset.members:
        raise StageError("cluster", "empty Rashomon set: no candidate fell "
                                    "inside the epsilon band")

    # 6. cluster the explanation space
    with timed("cluster"):
        vectors = [m.explanation for m in rset.members]
        distinct = np.unique(np.stack([v.e for v in vectors]), axis=0).shape[0]
        k_cap = min(25, int(math.floor(math.sqrt(len(vectors)))))
        k_max = config.k_max if config.k_max is not None else k_cap
        k_max = min(k_max, distinct)
        if k_max < 2 or config.k_min > k_max:
            raise StageError("cluster",
                             f"cluster count < 2 unreachable: {distinct} "
                             f"distinct explanation vectors")
        clusters = select_k(vectors, config.k_min, k_max, seeds["cluster"])
    if persist:
        write_cluster_report(clusters, vectors, out / "clusters.csv",
                             seed=seeds["report"])
        (out / "clusters.json").write_text(
            json.dumps(clusters.to_dict(), sort_keys=True, indent=2))

    # 7. per-cluster constituent search
    with timed("search"):
        budget = SearchBudget(
            m=config.search_m if config.search_m is not None else s_max,
            max_expansions=config.max_expansions, lam=config.lam)
        if persist:
            (out / "search").mkdir(exist_ok=True)
        constituents = []
        for c in range(clusters.k):
            trace = (out / "search" / f"cluster_{c}.jsonl") if persist else None
            constituents.append(search_constituent(
                c, clusters, rset, train, val, budget, trace_path=trace,
                ensemble_loss=config.ensemble_loss_search))

    # 8. combine and evaluate
    with timed("ensemble"):
        voting_ens = Ensemble(constituents=constituents, task=ds.task,
                              combiner="voting",
                              vote_threshold=config.vote_threshold)
        stacking_ens = None
        if ds.task == CLASSIFICATION:
            stacking_ens = fit_stacking(constituents, train,
                                        seeds["stacking"])
        ensemble = voting_ens if config.combiner == "voting" else stacking_ens
        if ensemble is None:
            raise StageError("ensemble", "stacking requested for a "
                                         "regression task")
        metrics = {
            "voting": {"val": evaluate(voting_ens, val),
                       "test": evaluate(voting_ens, test)},
        }
        if stacking_ens is not None:
            metrics["stacking"] = {"val": evaluate(stacking_ens, val),
                                   "test": evaluate(stacking_ens, test)}
        reference_metrics = None
        similarity = None
        ref_expl = None
        if rset.ref_tree is not None:
            reference_metrics = {"val": evaluate(rset.ref_tree, val),
                                 "test": evaluate(rset.ref_tree, test)}
            if ds.task == CLASSIFICATION:
                bg = background_sample(train, seed=seeds["fit"])
                ref_expl = explanation_vector(rset.ref_tree, val, bg,
                                              model_id="reference")
                similarity = similarity_report(ensemble, rset.ref_tree, test,
                                               reference_explanation=ref_expl)
    if persist:
        ensemble.save(out / "ensemble.json")
        if stacking_ens is not None and config.combiner != "stacking":
            stacking_ens.save(out / "ensemble_stacking.json")

    # 9. drift + agreement reports
    with timed("drift"):
        drift = None
        risk = None
        agreement_hist = None
        if ds.task == CLASSIFICATION:
            drift = drift_experiment(voting_ens, test,
                                     list(config.drift_levels),
                                     kind=config.drift_kind,
                                     seed=seeds["drift"],
                                     repeats=config.drift_repeats)
            risk = risk_stratify(voting_ens, test, config.risk_bins)
            vr = voting_ens.voting_ratios(test.rows)
            n_c = len(constituents)
            counts = np.bincount(np.rint(vr * n_c).astype(int),
                                 minlength=n_c + 1)
            agreement_hist = {
                "n_constituents": n_c,
                "ratios": [i / n_c for i in range(n_c + 1)],
                "counts": counts.tolist(),
            }
    if persist and drift is not None:
        reports = out / "reports"
        reports.mkdir(exist_ok=True)
        drift.write_json(reports / "drift.json")
        drift.write_csv(reports / "drift.csv")
        drift.write_gnuplot(reports / "drift.dat")
        (reports / "risk_strata.json").write_text(
            json.dumps(risk, sort_keys=True, indent=2))
        (reports / "agreement.json").write_text(
            json.dumps(agreement_hist, sort_keys=True, indent=2))

    manifest_doc = {
        "version": __version__,
        "config": config.to_dict(),
        "seeds": seeds,
        "dataset": {"rows": ds.n_rows, "d": ds.d, "task": ds.task,
                    "features": list(ds.schema.names)},
        "splits": {"train": train.n_rows, "val": val.n_rows,
                   "test": test.n_rows},
        "rashomon": {"ratio": ratio, "n_members": len(rset.members),
                     "n_sampled": rset.n_sampled, "ref_loss": rset.ref_loss,
                     "epsilon": rset.epsilon, "ref_mode": rset.ref_mode,
                     "plan": plan.to_dict()},
        "clusters": {"k": clusters.k, "silhouette": clusters.silhouette,
                     "clusteroid_ids": clusters.clusteroid_ids},
        "constituents": [
            {"id": c.id, "cluster": i,
             "subset": [ds.schema.names[j] for j in c.subset.indices],
             "subset_indices": list(c.subset.indices),
             "val_loss": c.val_loss}
            for i, c in enumerate(constituents)],
        "ensemble": {"combiner": config.combiner, "metrics": metrics},
        "reference": reference_metrics,
        "similarity_to_reference": similarity,
        "drift": drift.to_dict() if drift is not None else None,
    }
    manifest = RunManifest(manifest_doc)
    if persist:
        (out / "config.json").write_text(
            json.dumps(config.to_dict(), sort_keys=True, indent=2))
        (out / "manifest.json").write_text(manifest.to_json())
        (out / "timings.json").write_text(
            json.dumps(timings, sort_keys=True, indent=2))
    return PipelineResult(manifest=manifest, config=config, train=train,
                          val=val, test=test, rset=rset, clusters=clusters,
                          ensemble=ensemble, voting_ensemble=voting_ens,
                          reference_explanation=ref_expl)


def _scenario_similarity(candidate: Ensemble, reference: Ensemble,
                         test: Dataset) -> tuple[float, float]:
    ref_vec = mean_constituent_explanation(reference)
    rep = similarity_report(candidate, reference, test,
                            reference_explanation=ref_vec)
    return rep["jaccard"], rep["shap_cosine"]


def run_ablation(config: RunConfig, scenario: str, repeats: int,
                 reference: PipelineResult | None = None) -> dict:
    """Fig-3 style composition study against a completed reference run.

    I:   the full pipeline re-run per repeat (repeat 0 reuses the reference
         seed, so a single repeat self-compares to (1.0, 1.0)).
    II:  clusters kept, constituents drawn uniformly per cluster.
    III: constituents drawn uniformly from the whole Rashomon set (the
         epsilon band is the performance filter, see note in the report).
    """
    if scenario not in ("I", "II", "III"):
        raise ValueError(f"unknown scenario: {scenario}")
    if reference is None:
        raise StageError("ablation", "missing reference run")
    test = reference.test
    ref_ens = reference.voting_ensemble
    seeds = _stage_seeds(config.seed)
    pairs: list[tuple[float, float]] = []

    if scenario == "I":
        # method stochasticity only: the data partition stays the reference's
        data_seed = (config.data_seed if config.data_seed is not None
                     else config.seed)
        for rep in range(repeats):
            rep_seed = (config.seed if rep == 0
                        else derive_seed(seeds["ablation"], 1, rep))
            rep_config = dataclasses.replace(config, seed=rep_seed,
                                             data_seed=data_seed)
            result = run_pipeline(rep_config, persist=False)
            pairs.append(_scenario_similarity(result.voting_ensemble,
                                              ref_ens, test))
    else:
        rset = reference.rset
        clusters = reference.clusters
        members = {m.id: m for m in rset.members}
        for rep in range(repeats):
            rng = np.random.default_rng(
                derive_seed(seeds["ablation"], 2 if scenario == "II" else 3,
                            rep))
            if scenario == "II":
                chosen = []
                for c in range(clusters.k):
                    ids = clusters.members_of(c)
                    chosen.append(members[ids[int(rng.integers(len(ids)))]])
            else:
                ids = [m.id for m in rset.members]
                size = min(len(ref_ens.constituents), len(ids))
                picks = rng.choice(len(ids), size=size, replace=False)
                chosen = [members[ids[int(i)]] for i in picks]
            ens = Ensemble(constituents=chosen, task=test.task,
                           combiner="voting",
                           vote_threshold=config.vote_threshold)
            pairs.append(_scenario_similarity(ens, ref_ens, test))

    jac = np.array([p[0] for p in pairs])
    cos = np.array([p[1] for p in pairs])
    return {
        "scenario": scenario,
        "repeats": repeats,
        "pairs": [[float(a), float(b)] for a, b in pairs],
        "jaccard_mean": float(jac.mean()),
        "jaccard_std": float(jac.std()),
        "cosine_mean": float(cos.mean()),
        "cosine_std": float(cos.std()),
        "note": "scenario III filters by the run's epsilon band (the spec's "
                "statistical filter is unnamed)" if scenario == "III" else "",
    }


def load_run(out_dir: str | Path) -> PipelineResult:
    """Rehydrate a persisted run from its artifacts (no recomputation)."""
    from .cluster import ClusterModel
    from .rashomon import load_rashomon
    out = Path(out_dir)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        raise StageError("load-run", f"missing reference run: {manifest_path}")
    manifest = RunManifest.load(manifest_path)
    config = RunConfig.from_dict(manifest["config"])
    train = load_csv(out / "data" / "train.csv", config.target, config.task)
    val = load_csv(out / "data" / "val.csv", config.target, config.task)
    test = load_csv(out / "data" / "test.csv", config.target, config.task)
    rset = load_rashomon(out / "rashomon")
    clusters = ClusterModel.from_dict(
        json.loads((out / "clusters.json").read_text()))
    ensemble = Ensemble.load(out / "ensemble.json")
    if ensemble.combiner == "voting":
        voting = ensemble
    else:
        voting = Ensemble(constituents=ensemble.constituents,
                          task=ensemble.task, combiner="voting",
                          vote_threshold=ensemble.vote_threshold)
    ref_expl = None
    if rset.ref_tree is not None and config.task == CLASSIFICATION:
        seeds = _stage_seeds(config.seed)
        bg = background_sample(train, seed=seeds["fit"])
        ref_expl = explanation_vector(rset.ref_tree, val, bg,
                                      model_id="reference")
    return PipelineResult(manifest=manifest, config=config, train=train,
                          val=val, test=test, rset=rset, clusters=clusters,
                          ensemble=ensemble, voting_ensemble=voting,
                          reference_explanation=ref_expl)
