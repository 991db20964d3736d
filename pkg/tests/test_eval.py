import itertools
import math

import numpy as np
import pytest
from conftest import random_run
from scipy import stats as sstats

from gbm.core import Dataset, Dims, Group, Permutation, Run
from gbm.em import FitConfig, fit_single_group
from gbm.evaluation import (BaselineModel, DegenerateClasses, DegenerateDenominator, EvalReport,
                            align_states, anomaly_scores, best_threshold, fit_baseline, loo_cv, normalised_ll,
                            permute_params, rdl, select_num_states, solve_assignment,
                            welch_ttest)
from gbm.synth import SynthSpec, random_params, sample_dataset


def _hard_run(cats, run_id="r0"):
    cats = np.asarray(cats)
    probs = np.zeros((len(cats), 1, 5))
    probs[np.arange(len(cats)), 0, cats] = 1.0
    return Run(run_id, probs, np.zeros((len(cats), 1), bool))


def test_baseline_one_hot_category():
    m = fit_baseline(Group("g", (_hard_run([3, 3, 3, 3]),)), alpha=1.0)
    np.testing.assert_allclose(m.probs[0], [0, 0, 0, 1, 0])


def test_baseline_two_categories():
    m = fit_baseline(Group("g", (_hard_run([1, 2]),)), alpha=1.0)
    np.testing.assert_allclose(m.probs[0], [0, 0.5, 0.5, 0, 0])


def test_baseline_soft_is_mean_vector():
    rng = np.random.default_rng(0)
    run = random_run(rng, 30, 2, 4)
    m = fit_baseline(Group("g", (run,)), alpha=1.0)
    np.testing.assert_allclose(m.probs, run.probs.mean(axis=0), atol=1e-14)


def test_baseline_on_training_data_is_negative_entropy():
    cats = [0, 0, 1, 2, 2, 2, 4, 0]
    g = Group("g", (_hard_run(cats),))
    m = fit_baseline(g, alpha=1.0)
    freq = np.bincount(cats, minlength=5) / len(cats)
    neg_entropy = sum(f * math.log(f) for f in freq if f > 0)
    assert normalised_ll(m, g).ll_normalised == pytest.approx(neg_entropy, abs=1e-12)


def test_uniform_baseline_l_hat():
    run = random_run(np.random.default_rng(1), 40, 3, 7, missing_rate=0.2)
    rep = normalised_ll(BaselineModel(np.full((3, 7), 1 / 7)), Group("g", (run,)))
    assert rep.ll_normalised == pytest.approx(math.log(1 / 7), abs=1e-12)
    assert rep.n_units == run.num_observed


def test_baseline_empty_channel_falls_back_to_uniform():
    probs = np.zeros((3, 2, 4))
    probs[:, 0, 1] = 1.0
    missing = np.zeros((3, 2), bool)
    missing[:, 1] = True
    m = fit_baseline(Group("g", (Run("r", probs, missing),)), alpha=1.0)
    np.testing.assert_allclose(m.probs[1], 0.25)


def test_rdl_examples():
    def rep(lhat):
        return EvalReport(lhat * 10, 10)
    assert rdl(rep(-1.2), rep(-1.2), rep(-2.2)) == 0.0
    assert rdl(rep(-1.2), rep(-1.1), rep(-2.2)) == pytest.approx(-10.0, abs=1e-10)
    assert rdl(rep(-1.2), rep(-1.3), rep(-2.2)) > 0
    with pytest.raises(DegenerateDenominator):
        rdl(rep(-2.2), rep(-1.1), rep(-2.2))
    with pytest.raises(ValueError):
        rdl(rep(-1.2), EvalReport(-1.0, 3), rep(-2.2))


def _small_dataset(seed, Z=2, groups=2, runs=2, T=300, K=2, X=4, scramble=True):
    rng = np.random.default_rng(seed)
    truth = random_params(Dims(Z, K, X), rng)
    ds, gt = sample_dataset(SynthSpec(truth, groups, runs, T, scramble_seed=seed if scramble else None,
                                      rng_seed=seed))
    return truth, ds, gt


def test_loo_cv_fold_structure():
    _, ds, _ = _small_dataset(0, runs=3, T=150)
    cv = loo_cv(ds, ds.dims(2), FitConfig(restart_policy="single"))
    assert len(cv.folds) == 3
    for f in cv.folds:
        assert f.report.n_units == sum(g.runs[f.fold].num_observed for g in ds.groups)
    assert np.isfinite(cv.mean_ll) and np.isfinite(cv.pooled_ll)


def test_loo_cv_identical_runs_give_equal_folds():
    rng = np.random.default_rng(2)
    run = random_run(rng, 100, 2, 3, hard=True)
    twin = Run("r1", run.probs, run.missing)
    ds = Dataset((Group("g", (Run("r0", run.probs, run.missing), twin)),))
    cv = loo_cv(ds, ds.dims(2), FitConfig())
    a, b = (f.report.ll_normalised for f in cv.folds)
    assert a == pytest.approx(b, abs=1e-6)


def test_loo_cv_needs_two_runs():
    _, ds, _ = _small_dataset(0, runs=1, T=50)
    with pytest.raises(ValueError):
        loo_cv(ds, ds.dims(2))


def test_select_single_state_equals_baseline():
    rng = np.random.default_rng(3)
    runs = tuple(random_run(rng, 200, 2, 4, 0.1, hard=True, run_id=f"r{i}") for i in range(3))
    ds = Dataset((Group("g", runs),))
    sel = select_num_states(ds, [1], FitConfig(prior_psi=1.1))
    cv = loo_cv(ds, ds.dims(1), FitConfig(prior_psi=1.1))
    base = (sum(f.baseline.ll_total for f in cv.folds) / sum(f.baseline.n_units for f in cv.folds))
    assert sel.mean[1] == pytest.approx(base, abs=1e-6)
    assert all(row[0] == 1 for row in sel.rows) and len(sel.rows) == 3


def test_held_out_worse_than_training_on_average():
    gaps = []
    for seed in range(3):
        truth, ds, _ = _small_dataset(seed, Z=2, groups=1, runs=2, T=1000)
        cv = loo_cv(ds, truth.dims, FitConfig(rng_seed=seed))
        for f in cv.folds:
            train = Dataset(tuple(Group(g.group_id, tuple(r for i, r in enumerate(g.runs)
                                                          if i != f.fold)) for g in ds.groups))
            gaps.append(normalised_ll(f.fit, train).ll_normalised - f.report.ll_normalised)
    assert np.mean(gaps) > 0


def test_threshold_separable():
    thr, acc = best_threshold([-1.0, -1.1], [-1.5, -1.6])
    assert acc == 1.0 and -1.5 < thr < -1.1
    assert thr == pytest.approx(-1.3)


def test_threshold_identical_sets():
    thr, acc = best_threshold([-1.0, -1.2, -1.4], [-1.0, -1.2, -1.4])
    assert acc <= 0.5 + 1 / 6


def test_threshold_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(0, 1, 7), rng.normal(0.5, 1, 6)
        thr, acc = best_threshold(a, b)
        grid = np.linspace(-6, 6, 20001)
        best = max(((a > c).sum() + (b < c).sum()) / 13 for c in grid)
        assert acc == pytest.approx(best)


def test_welch_examples():
    t, p = welch_ttest([1, 2, 3], [1, 2, 3])
    assert t == 0.0 and p == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a = np.zeros(4) + rng.uniform(-1e-6, 1e-6, 4)
    b = np.ones(4) + rng.uniform(-1e-6, 1e-6, 4)
    t, p = welch_ttest(a, b)
    # closed-form Welch statistic and Satterthwaite degrees of freedom
    va, vb = a.var(ddof=1) / 4, b.var(ddof=1) / 4
    t_hand = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / 3 + vb ** 2 / 3)
    p_hand = 2 * sstats.t.sf(abs(t_hand), df)
    assert t == pytest.approx(t_hand, rel=1e-12)
    assert p == pytest.approx(p_hand, rel=1e-6) and p < 1e-6


def test_welch_constant_samples():
    assert welch_ttest([1, 1], [1, 1]) == (0.0, 1.0)
    t, p = welch_ttest([0, 0], [1, 1])
    assert t == -np.inf and p == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_solve_assignment_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        cost = rng.random((n, n))
        cols = solve_assignment(cost)
        got = cost[np.arange(n), cols].sum()
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert got == pytest.approx(best, abs=1e-12)
        assert sorted(cols) == list(range(n))


def test_align_states_identity():
    truth, _, _ = _small_dataset(0, Z=3, K=3)
    al = align_states(truth, truth)
    assert al.cost == 0.0 and al.channel_perm.index == 0
    np.testing.assert_array_equal(al.state_perm, [0, 1, 2])


def test_align_states_recovers_shift_and_channel_swap():
    truth, _, _ = _small_dataset(1, Z=4, K=3)
    shift = np.roll(np.arange(4), 1)
    swap = Permutation.from_word((2, 0, 1))
    other = permute_params(truth, swap, shift)
    al = align_states(truth, other)
    assert al.cost < 1e-12
    np.testing.assert_allclose(al.aligned.psi, truth.psi, atol=1e-15)
    np.testing.assert_allclose(al.aligned.omega, truth.omega, atol=1e-15)
    np.testing.assert_allclose(al.aligned.pi, truth.pi, atol=1e-15)


def test_align_states_positive_cost_for_different_models():
    a, _, _ = _small_dataset(1, Z=2)
    b, _, _ = _small_dataset(2, Z=2)
    assert align_states(a, b).cost > 1e-6


def test_split_run_asymmetry():
    truth, ds, _ = _small_dataset(4, Z=2, groups=1, runs=1, T=200, scramble=False)
    run = ds.groups[0].runs[0]
    halves = Group("g00", (Run("a", run.probs[:100], run.missing[:100]),
                           Run("b", run.probs[100:], run.missing[100:])))
    whole = Group("g00", (run,))
    base = fit_baseline(whole)
    assert normalised_ll(base, halves).ll_total == pytest.approx(normalised_ll(base, whole).ll_total,
                                                                   abs=1e-9)
    ident = {"g00": Permutation.identity(2)}
    gbm_whole = normalised_ll(truth, whole, ident).ll_total
    gbm_split = normalised_ll(truth, halves, ident).ll_total
    assert abs(gbm_whole - gbm_split) > 1e-6


def test_anomaly_identical_classes():
    truth, ds, _ = _small_dataset(5, groups=4, runs=1, T=100)
    rep = anomaly_scores(truth, ds, ds)
    assert rep.accuracy <= 0.5 + 1 / 8
    assert rep.p == pytest.approx(1.0)
    assert set(rep.summary()) == {"threshold", "accuracy", "t", "p"}


def test_anomaly_needs_both_classes():
    truth, ds, _ = _small_dataset(5, groups=2, runs=1, T=50)
    with pytest.raises(DegenerateClasses):
        anomaly_scores(truth, ds, Dataset(()))


def test_anomaly_per_run_rows():
    truth, ds, _ = _small_dataset(6, groups=2, runs=2, T=60)
    rep = anomaly_scores(truth, ds, ds, per_run=True)
    assert len(rep.scores) == 8 and all(r[2] is not None for r in rep.scores)


def test_normalised_ll_uses_map_permutation_when_missing():
    truth, ds, gt = _small_dataset(7, groups=2, runs=1, T=400)
    with_truth = normalised_ll(truth, ds, gt.permutations).ll_total
    assert normalised_ll(truth, ds).ll_total >= with_truth - 1e-9


def test_per_group_fit_scores_its_group():
    truth, ds, _ = _small_dataset(8, groups=1, runs=2, T=300)
    g = ds.groups[0]
    res = fit_single_group(g, truth.dims, FitConfig())
    rep = normalised_ll(res, g)
    assert rep.ll_total == pytest.approx(res.ll_trace[-1], abs=1e-6)
