"""rashens: Rashomon ensembles over decision-tree feature subsets.

Sample tree models on random feature subsets, keep those within an epsilon
band of a reference model, cluster them by explanation vectors, search each
cluster for an optimal constituent, and combine constituents into an ensemble
whose inter-constituent agreement doubles as a production risk signal.
"""

__version__ = "0.1.0"

from .data import (CLASSIFICATION, REGRESSION, Dataset, FeatureSchema,
                   PerturbationSpec, ScalerParams, load_csv, perturb, split,
                   standardize)
from .tree import (FeatureSubset, Tree, TreeParams, auroc, evaluate, fit_tree,
                   mape, predict)
from .explain import (Explanation, ExplanationVector, brute_force_shapley,
                      explanation_vector, tree_shap)
from .rashomon import (CandidateModel, RashomonSet, ReferenceSpec,
                       SamplingPlan, build_rashomon_set, rashomon_ratio,
                       required_sample_size, sample_candidates,
                       subset_inclusion_probability)
from .cluster import (ClusterModel, clusteroids, kmeans, project_2d, select_k,
                      silhouette)
from .search import (SearchBudget, expand, membership_check, node_score,
                     search_constituent)
from .ensemble import (AgreementReport, DriftReport, Ensemble,
                       drift_experiment, fit_stacking, jsd, pairwise_jsd,
                       predict_voting, risk_stratify, similarity_report)
from .pipeline import (PipelineResult, RunConfig, RunManifest, StageError,
                       load_run, run_ablation, run_pipeline)
