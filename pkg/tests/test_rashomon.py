import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from rashens.data import split, standardize
from rashens.rashomon import (CandidateModel, RashomonSet, ReferenceSpec,
                              SamplingPlan, build_rashomon_set,
                              delong_worse_pvalue, load_rashomon,
                              rashomon_ratio, required_sample_size,
                              sample_candidates, save_rashomon,
                              subset_inclusion_probability)
from rashens.tree import FeatureSubset, TreeParams, fit_tree

from conftest import make_classification


def enumerate_inclusion(F, K, S):
    """Exhaustive oracle for the inclusion probability: count subsets of
    size K..S containing a fixed K-set, over all subsets of those sizes."""
    key = set(range(K))
    hits = total = 0
    for s in range(K, S + 1):
        for combo in itertools.combinations(range(F), s):
            total += 1
            hits += key <= set(combo)
    return Fraction(hits, total)


class TestInclusionProbability:
    def test_empty_key(self):
        assert subset_inclusion_probability(10, 0, 3) == 1.0

    def test_small_case_exhaustive(self):
        expected = enumerate_inclusion(5, 1, 2)
        assert expected == Fraction(5, 15)
        got = subset_inclusion_probability(5, 1, 2)
        assert got == pytest.approx(float(expected), abs=1e-12)

    def test_more_exhaustive_cases(self):
        for F, K, S in [(6, 2, 3), (7, 1, 4), (8, 3, 5), (6, 2, 2)]:
            expected = float(enumerate_inclusion(F, K, S))
            assert subset_inclusion_probability(F, K, S) == \
                pytest.approx(expected, rel=1e-12)

    def test_paper_scale_magnitude(self):
        p = subset_inclusion_probability(100, 4, 10)
        assert p == pytest.approx(5e-5, abs=5e-6)

    def test_monotone_in_key_size(self):
        probs = [subset_inclusion_probability(40, k, 10) for k in range(1, 9)]
        assert all(a >= b for a, b in zip(probs, probs[1:]))

    def test_monotone_in_smax(self):
        probs = [subset_inclusion_probability(40, 3, s) for s in range(3, 15)]
        assert all(a <= b for a, b in zip(probs, probs[1:]))

    def test_full_width(self):
        assert subset_inclusion_probability(6, 6, 6) == pytest.approx(1.0)


class TestRequiredSampleSize:
    def test_exact_value_against_bigint_oracle(self):
        """Exact-arithmetic oracle: P_K from integer binomials, then
        ceil(ln(0.05)/ln(1-P_K))."""
        num = sum(math.comb(96, s - 4) for s in range(4, 11))
        den = sum(math.comb(100, s) for s in range(4, 11))
        p = num / den
        expected = math.ceil(math.log(0.05) / math.log1p(-p))
        assert expected == 58654
        assert required_sample_size(100, 4, 10, 0.95) == expected

    def test_small_alpha(self):
        # P_K = 0.5 at F=2, K=1, S=1; ceil(ln(.99)/ln(.5)) = 1
        assert subset_inclusion_probability(2, 1, 1) == pytest.approx(0.5)
        assert required_sample_size(2, 1, 1, 0.01) == 1

    def test_certain_coverage(self):
        assert required_sample_size(6, 6, 6, 0.999) == 1

    def test_monotone_in_alpha(self):
        sizes = [required_sample_size(30, 2, 6, a)
                 for a in (0.5, 0.8, 0.9, 0.95, 0.99)]
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))

    def test_decreasing_in_inclusion_probability(self):
        # raising S_max raises P_K, which lowers the required sample size
        sizes = [required_sample_size(30, 2, s, 0.95) for s in range(2, 10)]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    def test_alpha_bounds(self):
        with pytest.raises(ValueError):
            required_sample_size(10, 1, 2, 1.0)


class TestSampler:
    def test_degenerate_plan_fixed_subset(self):
        plan = SamplingPlan(F=5, K_size=5, S_max=5, alpha=0.9, n_models=20,
                            seed=1)
        subsets = sample_candidates(plan)
        assert all(s.indices == (0, 1, 2, 3, 4) for s in subsets)

    def test_sizes_in_range(self):
        plan = SamplingPlan(F=20, K_size=2, S_max=5, alpha=0.9,
                            n_models=2000, seed=2)
        sizes = {s.size for s in sample_candidates(plan)}
        assert sizes == {2, 3, 4, 5}

    def test_size_uniformity_chi_square(self):
        plan = SamplingPlan(F=20, K_size=1, S_max=5, alpha=0.9,
                            n_models=100_000, seed=3)
        sizes = [s.size for s in sample_candidates(plan)]
        counts = np.bincount(sizes, minlength=6)[1:6]
        chi2 = ((counts - 20_000.0) ** 2 / 20_000.0).sum()
        p_value = stats.chi2.sf(chi2, df=4)
        assert p_value > 0.001

    def test_stratified_sizes_round_robin(self):
        plan = SamplingPlan(F=10, K_size=1, S_max=4, alpha=0.9, n_models=400,
                            seed=4, stratified_sizes=True)
        sizes = np.array([s.size for s in sample_candidates(plan)])
        assert np.bincount(sizes, minlength=5)[1:5].tolist() == [100] * 4

    def test_deterministic(self):
        plan = SamplingPlan(F=15, K_size=1, S_max=6, alpha=0.9, n_models=50,
                            seed=5)
        assert ([s.indices for s in sample_candidates(plan)]
                == [s.indices for s in sample_candidates(plan)])

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            SamplingPlan(F=5, K_size=0, S_max=3, alpha=0.9, n_models=10,
                         seed=0)
        with pytest.raises(ValueError):
            SamplingPlan(F=5, K_size=2, S_max=6, alpha=0.9, n_models=10,
                         seed=0)


@pytest.fixture(scope="module")
def splits():
    ds = make_classification(400, 9, seed=30)
    train_full, _ = split(ds, 0.8, seed=1)
    train, val = split(train_full, 0.8, seed=2)
    (train, val), _ = standardize(train, [val])
    return train, val


class TestBuildRashomonSet:
    def test_infinite_epsilon_keeps_everything(self, splits):
        train, val = splits
        plan = SamplingPlan(F=9, K_size=1, S_max=4, alpha=0.9, n_models=60,
                            seed=6)
        rset = build_rashomon_set(sample_candidates(plan), train, val,
                                  TreeParams(), ReferenceSpec(),
                                  epsilon=np.inf, plan=plan)
        assert len(rset.members) == 60
        assert rashomon_ratio(rset) == 1.0

    def test_threshold_reference_median_split(self, splits):
        """Set the loss threshold at the median candidate loss: by
        construction about half the (deduplicated) candidates clear it."""
        train, val = splits
        plan = SamplingPlan(F=9, K_size=1, S_max=4, alpha=0.9, n_models=80,
                            seed=7)
        candidates = sample_candidates(plan)
        losses = []
        from rashens.tree import loss as model_loss
        for sub in candidates:
            losses.append(model_loss(fit_tree(train, sub, TreeParams()), val))
        cut = float(np.median(losses))
        rset = build_rashomon_set(candidates, train, val, TreeParams(),
                                  ReferenceSpec(mode="threshold", value=cut),
                                  epsilon=0.0, plan=plan)
        ratio = rashomon_ratio(rset)
        assert 0.4 <= ratio <= 0.6
        assert rset.ref_loss == cut

    def test_membership_predicate_recheck(self, splits):
        train, val = splits
        plan = SamplingPlan(F=9, K_size=1, S_max=4, alpha=0.9, n_models=50,
                            seed=8)
        rset = build_rashomon_set(sample_candidates(plan), train, val,
                                  TreeParams(), ReferenceSpec(), epsilon=0.05,
                                  plan=plan)
        for m in rset.members:
            assert m.val_loss <= rset.ref_loss + rset.epsilon
            assert m.explanation is not None
            assert np.linalg.norm(m.explanation.e) == pytest.approx(1.0)

    def test_monotone_in_epsilon(self, splits):
        train, val = splits
        plan = SamplingPlan(F=9, K_size=1, S_max=4, alpha=0.9, n_models=50,
                            seed=9)
        candidates = sample_candidates(plan)
        counts = []
        for eps in (0.0, 0.02, 0.05, 0.1, 0.5):
            rset = build_rashomon_set(candidates, train, val, TreeParams(),
                                      ReferenceSpec(), epsilon=eps, plan=plan)
            counts.append(len(rset.members))
        assert all(a <= b for a, b in zip(counts, counts[1:]))

    def test_reproducible_bit_exact(self, splits):
        train, val = splits
        plan = SamplingPlan(F=9, K_size=1, S_max=4, alpha=0.9, n_models=40,
                            seed=10)
        a = build_rashomon_set(sample_candidates(plan), train, val,
                               TreeParams(), ReferenceSpec(), 0.05, plan=plan)
        b = build_rashomon_set(sample_candidates(plan), train, val,
                               TreeParams(), ReferenceSpec(), 0.05, plan=plan)
        assert a.member_ids() == b.member_ids()
        assert [m.val_loss for m in a.members] == \
            [m.val_loss for m in b.members]

    def test_save_load_round_trip(self, splits, tmp_path):
        train, val = splits
        plan = SamplingPlan(F=9, K_size=1, S_max=4, alpha=0.9, n_models=40,
                            seed=11)
        rset = build_rashomon_set(sample_candidates(plan), train, val,
                                  TreeParams(), ReferenceSpec(), 0.05,
                                  plan=plan)
        save_rashomon(rset, tmp_path, feature_names=train.schema.names)
        back = load_rashomon(tmp_path)
        assert back.member_ids() == rset.member_ids()
        assert back.ref_loss == rset.ref_loss
        for m0, m1 in zip(rset.members, back.members):
            assert np.array_equal(m0.explanation.e, m1.explanation.e)
            assert m0.subset.indices == m1.subset.indices


class TestRatio:
    def test_paper_scale_rounding(self):
        rset = RashomonSet(ref_loss=0.38, epsilon=0.0,
                           members=[None] * 63_374, n_sampled=1_049_999,
                           task="binary-classification")
        assert round(rashomon_ratio(rset), 4) == 0.0604

    def test_trivial_bounds(self):
        empty = RashomonSet(0.1, 0.0, [], 10, "binary-classification")
        assert rashomon_ratio(empty) == 0.0
        full = RashomonSet(0.1, 0.0, [None] * 10, 10, "binary-classification")
        assert rashomon_ratio(full) == 1.0


class TestDeLong:
    def test_identical_scores_not_worse(self):
        rng = np.random.default_rng(12)
        scores = rng.random(60)
        labels = rng.integers(0, 2, 60).astype(float)
        labels[0], labels[1] = 0.0, 1.0
        p = delong_worse_pvalue(scores, scores, labels)
        assert p > 0.05

    def test_clearly_worse_candidate(self):
        rng = np.random.default_rng(13)
        labels = rng.integers(0, 2, 200).astype(float)
        good = labels + rng.normal(0, 0.2, 200)
        bad = rng.normal(0, 1, 200)
        p = delong_worse_pvalue(bad, good, labels)
        assert p < 0.05
