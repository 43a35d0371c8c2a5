import math

import numpy as np
import pytest

from rashens.data import (CLASSIFICATION, REGRESSION, Dataset, FeatureSchema,
                          split, standardize)
from rashens.ensemble import (Ensemble, drift_experiment, fit_stacking, jsd,
                              mean_pairwise_jsd, pairwise_jsd, predict_voting,
                              risk_stratify, similarity_report)
from rashens.explain import ExplanationVector
from rashens.rashomon import CandidateModel
from rashens.tree import FeatureSubset, Tree, TreeParams, auroc, fit_tree

from conftest import make_classification, make_regression


def constant_tree(value, d=2, task=CLASSIFICATION):
    """Single-leaf tree emitting a fixed value."""
    return Tree(feature=np.array([-1]), threshold=np.zeros(1),
                left=np.array([-1]), right=np.array([-1]),
                value=np.array([float(value)]), count=np.array([1]),
                subset=FeatureSubset((0,)), params=TreeParams(), task=task)


def as_candidate(tree, cid, e=None):
    expl = ExplanationVector(e=e if e is not None else np.zeros(2),
                             model_id=cid)
    return CandidateModel(id=cid, subset=tree.subset, tree=tree, val_loss=0.1,
                          explanation=expl)


def constant_ensemble(values, task=CLASSIFICATION, combiner="voting"):
    constituents = [as_candidate(constant_tree(v, task=task), f"c{i}")
                    for i, v in enumerate(values)]
    return Ensemble(constituents=constituents, task=task, combiner=combiner)


class TestJsd:
    def test_identity(self):
        assert jsd(np.array([0.3, 0.7]), np.array([0.3, 0.7])) == 0.0

    def test_disjoint_support_is_one(self):
        assert jsd(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == \
            pytest.approx(1.0, abs=1e-12)

    def test_closed_form_value(self):
        """Independent evaluation of the closed form for p=[.5,.5], q=[1,0]:
        m=[.75,.25]; KL(p||m)/2 + KL(q||m)/2, base-2, then sqrt."""
        kl_pm = 0.5 * math.log2(0.5 / 0.75) + 0.5 * math.log2(0.5 / 0.25)
        kl_qm = 1.0 * math.log2(1.0 / 0.75)
        expected = math.sqrt(0.5 * kl_pm + 0.5 * kl_qm)
        got = jsd(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.5579, abs=1e-3)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="sum to 1"):
            jsd(np.array([0.5, 0.6]), np.array([0.5, 0.5]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            jsd(np.array([-0.1, 1.1]), np.array([0.5, 0.5]))

    def test_metric_axioms_sample(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            p, q, r = (rng.dirichlet(np.ones(4)) for _ in range(3))
            dpq, dqp = jsd(p, q), jsd(q, p)
            assert abs(dpq - dqp) < 1e-12
            assert -1e-12 <= dpq <= 1.0 + 1e-12
            assert jsd(p, q) <= jsd(p, r) + jsd(r, q) + 1e-9


class TestPairwise:
    def test_symmetric_zero_diagonal(self):
        ds = make_classification(60, 4, seed=1)
        t1 = fit_tree(ds, FeatureSubset((0,)), TreeParams(max_depth=2))
        t2 = fit_tree(ds, FeatureSubset((1,)), TreeParams(max_depth=2))
        t3 = fit_tree(ds, FeatureSubset((2, 3)), TreeParams(max_depth=2))
        mat = pairwise_jsd([t1, t2, t3], ds)
        assert np.array_equal(mat, mat.T)
        assert np.array_equal(np.diag(mat), np.zeros(3))

    def test_duplicate_model_zero_distance(self):
        ds = make_classification(40, 3, seed=2)
        t = fit_tree(ds, FeatureSubset((0, 1)), TreeParams())
        mat = pairwise_jsd([t, t], ds)
        assert mat[0, 1] == 0.0

    def test_independent_stumps_positive(self):
        ds = make_classification(80, 4, seed=3)
        t1 = fit_tree(ds, FeatureSubset((0,)), TreeParams(max_depth=1))
        t2 = fit_tree(ds, FeatureSubset((1,)), TreeParams(max_depth=1))
        assert pairwise_jsd([t1, t2], ds)[0, 1] > 0.0


class TestVoting:
    def test_eight_of_ten(self):
        e = constant_ensemble([0.9] * 8 + [0.1] * 2)
        prob, report = predict_voting(e, np.zeros(2))
        assert prob == pytest.approx(0.8)
        assert report.voting_ratio == pytest.approx(0.8)

    def test_unanimous(self):
        e = constant_ensemble([0.9, 0.8, 0.99])
        prob, report = predict_voting(e, np.zeros(2))
        assert prob == 1.0
        assert max(report.voting_ratio, 1 - report.voting_ratio) == 1.0

    def test_vote_values_quantized(self):
        ds = make_classification(50, 5, seed=4)
        constituents = [as_candidate(
            fit_tree(ds, FeatureSubset((j,)), TreeParams(max_depth=2)),
            f"c{j}") for j in range(5)]
        e = Ensemble(constituents=constituents, task=CLASSIFICATION)
        ratios = e.voting_ratios(ds.rows)
        assert set(np.rint(ratios * 5).astype(int)) <= set(range(6))
        assert np.allclose(ratios * 5, np.rint(ratios * 5))

    def test_regression_mean_and_cv(self):
        e = constant_ensemble([1.0, 3.0], task=REGRESSION)
        pred, report = predict_voting(e, np.zeros(2))
        assert pred == 2.0
        assert report.c_v == pytest.approx(0.5)  # population std 1, mean 2

    def test_regression_batch_is_exact_mean(self):
        ds = make_regression(40, 3, seed=5)
        t1 = fit_tree(ds, FeatureSubset((0,)), TreeParams())
        t2 = fit_tree(ds, FeatureSubset((1, 2)), TreeParams())
        e = Ensemble(constituents=[as_candidate(t1, "a"),
                                   as_candidate(t2, "b")], task=REGRESSION)
        preds = e.predict_batch(ds.rows)
        manual = (t1.predict_batch(ds.rows) + t2.predict_batch(ds.rows)) / 2
        assert np.array_equal(preds, manual)

    def test_cv_zero_mean_error(self):
        e = constant_ensemble([1.0, -1.0], task=REGRESSION)
        with pytest.raises(ValueError, match="mean ~ 0"):
            predict_voting(e, np.zeros(2))


class TestStacking:
    @pytest.fixture(scope="class")
    def complementary(self):
        """Two constituents with disjoint competence regions: feature 0
        encodes the label on even rows, feature 1 on odd rows."""
        rng = np.random.default_rng(6)
        n = 300
        y = rng.integers(0, 2, n).astype(float)
        gate = np.arange(n) % 2
        f0 = np.where(gate == 0, y, rng.integers(0, 2, n))
        f1 = np.where(gate == 1, y, rng.integers(0, 2, n))
        X = np.column_stack([f0, f1, gate]).astype(float)
        ds = Dataset(X, y, FeatureSchema(("f0", "f1", "gate")),
                     CLASSIFICATION)
        train, val = split(ds, 0.7, seed=7)
        c0 = as_candidate(fit_tree(train, FeatureSubset((0,)),
                                   TreeParams(max_depth=2)), "c0")
        c1 = as_candidate(fit_tree(train, FeatureSubset((1,)),
                                   TreeParams(max_depth=2)), "c1")
        return train, val, c0, c1

    def test_single_constituent_rank_invariant(self, complementary):
        train, val, c0, _ = complementary
        stacked = fit_stacking([c0], train, seed=0)
        a = auroc(stacked.predict_batch(val.rows), val.labels)
        b = auroc(c0.tree.predict_batch(val.rows), val.labels)
        assert a == pytest.approx(b, abs=1e-12)

    def test_complementary_beats_best_individual(self, complementary):
        train, val, c0, c1 = complementary
        stacked = fit_stacking([c0, c1], train, seed=1)
        stacked_auroc = auroc(stacked.predict_batch(val.rows), val.labels)
        individual = max(auroc(c.tree.predict_batch(val.rows), val.labels)
                         for c in (c0, c1))
        assert stacked_auroc > individual

    def test_identical_constituents_rank_identical(self, complementary):
        train, val, c0, _ = complementary
        stacked = fit_stacking([c0, c0, c0], train, seed=2)
        a = stacked.predict_batch(val.rows)
        b = c0.tree.predict_batch(val.rows)
        assert auroc(a, val.labels) == pytest.approx(
            auroc(b, val.labels), abs=1e-12)

    def test_regression_rejected(self):
        ds = make_regression(60, 3, seed=8)
        c = as_candidate(fit_tree(ds, FeatureSubset((0,)), TreeParams()), "c")
        with pytest.raises(ValueError, match="classification"):
            fit_stacking([c], ds, seed=0)


class TestRiskStratify:
    def test_unanimous_correct_single_top_bucket(self):
        ds = make_classification(30, 2, seed=9)
        labels = np.ones(30)
        ds = Dataset(ds.rows, labels, ds.schema, CLASSIFICATION)
        e = constant_ensemble([0.9, 0.8, 0.95])
        strata = risk_stratify(e, ds, bins=4)
        assert strata[-1]["count"] == 30
        assert strata[-1]["accuracy"] == 1.0
        assert all(s["count"] == 0 for s in strata[:-1])

    def test_half_agreement_lowest_bucket(self):
        ds = make_classification(20, 2, seed=10)
        e = constant_ensemble([0.9, 0.1])  # always a 1-1 split
        strata = risk_stratify(e, ds, bins=5)
        assert strata[0]["count"] == 20

    def test_counts_sum(self):
        ds = make_classification(77, 5, seed=11)
        constituents = [as_candidate(
            fit_tree(ds, FeatureSubset((j,)), TreeParams(max_depth=2)),
            f"c{j}") for j in range(5)]
        e = Ensemble(constituents=constituents, task=CLASSIFICATION)
        strata = risk_stratify(e, ds, bins=6)
        assert sum(s["count"] for s in strata) == 77

    def test_requires_voting(self):
        ds = make_classification(30, 2, seed=12)
        e = constant_ensemble([0.9, 0.8])
        e.combiner = "stacking"
        with pytest.raises(ValueError, match="voting"):
            risk_stratify(e, ds, bins=3)


class TestDrift:
    @pytest.fixture(scope="class")
    def fitted(self):
        ds = make_classification(400, 6, seed=13)
        train_full, test = split(ds, 0.8, seed=1)
        train, val = split(train_full, 0.8, seed=2)
        (train, val, test), _ = standardize(train, [val, test])
        constituents = [as_candidate(
            fit_tree(train, FeatureSubset((j, j + 1)), TreeParams()),
            f"c{j}") for j in range(4)]
        e = Ensemble(constituents=constituents, task=CLASSIFICATION)
        return e, test

    def test_level_zero_bit_exact(self, fitted):
        e, test = fitted
        from rashens.ensemble import _drift_metrics
        report = drift_experiment(e, test, [0.0, 0.5], seed=3, repeats=4)
        clean = _drift_metrics(e, test)
        assert report.rows[0]["loss"] == clean[0]
        assert report.rows[0]["mean_pairwise_jsd"] == clean[1]
        assert report.rows[0]["mean_agreement"] == clean[2]

    def test_levels_must_increase(self, fitted):
        e, test = fitted
        with pytest.raises(ValueError, match="increasing"):
            drift_experiment(e, test, [0.5, 0.5], seed=0, repeats=2)

    def test_deterministic(self, fitted):
        e, test = fitted
        a = drift_experiment(e, test, [0.0, 1.0], seed=4, repeats=3)
        b = drift_experiment(e, test, [0.0, 1.0], seed=4, repeats=3)
        assert a.rows == b.rows

    def test_shuffle_kind(self, fitted):
        e, test = fitted
        report = drift_experiment(e, test, [0.0, 0.5, 0.9], kind="shuffle",
                                  seed=5, repeats=3)
        assert [r["level"] for r in report.rows] == [0.0, 0.5, 0.9]

    def test_report_files(self, fitted, tmp_path):
        e, test = fitted
        report = drift_experiment(e, test, [0.0, 0.8], seed=6, repeats=2)
        report.write_json(tmp_path / "d.json")
        report.write_csv(tmp_path / "d.csv")
        report.write_gnuplot(tmp_path / "d.dat")
        assert (tmp_path / "d.csv").read_text().startswith("level,loss")
        assert (tmp_path / "d.dat").read_text().startswith("# level")


class TestSimilarity:
    def test_identical_predictions(self):
        ds = make_classification(50, 3, seed=14)
        t = fit_tree(ds, FeatureSubset((0, 1)), TreeParams())
        e = Ensemble(constituents=[as_candidate(t, "c0")],
                     task=CLASSIFICATION)
        rep = similarity_report(e, t, ds)
        assert rep["jaccard"] == 1.0

    def test_disjoint_positive_sets(self):
        ds = make_classification(20, 2, seed=15)
        e = constant_ensemble([0.9])
        ref = constant_tree(0.1)
        rep = similarity_report(e, ref, ds)
        assert rep["jaccard"] == 0.0

    def test_no_positives_anywhere(self):
        ds = make_classification(20, 2, seed=16)
        e = constant_ensemble([0.1])
        rep = similarity_report(e, constant_tree(0.2), ds)
        assert rep["jaccard"] == 1.0

    def test_identical_explanations_cosine_one(self):
        ds = make_classification(20, 2, seed=17)
        vec = np.array([0.6, 0.8])
        e = Ensemble(constituents=[as_candidate(constant_tree(0.9), "c0",
                                                e=vec)], task=CLASSIFICATION)
        rep = similarity_report(e, constant_tree(0.9), ds,
                                reference_explanation=ExplanationVector(
                                    e=vec.copy()))
        assert rep["shap_cosine"] == pytest.approx(1.0)


def test_mean_pairwise_jsd_consistency():
    ds = make_classification(60, 4, seed=18)
    trees = [fit_tree(ds, FeatureSubset((j,)), TreeParams(max_depth=2))
             for j in range(3)]
    mat = pairwise_jsd(trees, ds)
    manual = (mat[0, 1] + mat[0, 2] + mat[1, 2]) / 3.0
    assert mean_pairwise_jsd(trees, ds) == pytest.approx(manual)


def test_ensemble_round_trip(tmp_path):
    ds = make_classification(60, 4, seed=19)
    constituents = [as_candidate(
        fit_tree(ds, FeatureSubset((j,)), TreeParams(max_depth=2)), f"c{j}",
        e=np.eye(4)[j]) for j in range(3)]
    e = Ensemble(constituents=constituents, task=CLASSIFICATION)
    e.save(tmp_path / "e.json")
    back = Ensemble.load(tmp_path / "e.json")
    assert np.array_equal(back.predict_batch(ds.rows),
                          e.predict_batch(ds.rows))
    assert [c.id for c in back.constituents] == ["c0", "c1", "c2"]
