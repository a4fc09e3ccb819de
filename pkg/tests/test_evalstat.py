import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dermfoundry.core import ShapeError, ValidationError
from dermfoundry.evalstat import (
    MetricReport,
    auroc,
    average_precision,
    bonferroni,
    bootstrap_ci,
    classification_metrics,
    fold_ci,
    metric_reports,
    permutation_test,
    seg_metrics,
    stars,
    ttest_two_sided,
)

from _helpers import exhaustive_bootstrap_bounds, exhaustive_permutation_p


# -- classification -----------------------------------------------------------


def test_perfect_predictions():
    for y in ([0, 1, 1, 1], [0, 1, 2, 2, 2, 1]):
        p = np.eye(max(y) + 1)[y]
        m = classification_metrics(y, p)
        for k in ("w_f1", "auroc", "aupr", "bacc", "sensitivity", "specificity"):
            assert m[k] == 1.0


def test_binary_auroc_ordering():
    assert auroc([0, 1], [0.1, 0.9]) == 1.0
    assert auroc([0, 1], [0.9, 0.1]) == 0.0
    assert auroc([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5


def test_three_class_hand_computed():
    y = [0, 0, 0, 1, 1, 2]
    pred = [0, 0, 1, 1, 2, 2]
    m = classification_metrics(y, np.eye(3)[pred])
    # per-class F1: 0.8, 0.5, 2/3 with supports 3, 2, 1
    assert m["w_f1"] == pytest.approx((3 * 0.8 + 2 * 0.5 + 1 * 2 / 3) / 6, abs=1e-12)
    assert m["bacc"] == pytest.approx((2 / 3 + 1 / 2 + 1) / 3, abs=1e-12)
    assert m["accuracy"] == pytest.approx(4 / 6)


def test_single_class_auroc_is_null_with_reason():
    m = classification_metrics([1, 1, 1], [[0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
    assert m["auroc"] is None and "auroc" in m["reasons"]
    assert m["specificity"] is None
    with pytest.raises(ShapeError):
        classification_metrics([0, 1], [[0.5, 0.5]])


def test_argmax_ties_go_low():
    m = classification_metrics([0, 1], [[0.5, 0.5], [0.5, 0.5]])
    assert m["sensitivity"] == 0.0 and m["specificity"] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_auroc_monotone_invariance(seed):
    r = np.random.default_rng(seed)
    y = r.integers(0, 2, 40)
    y[:2] = (0, 1)
    s = r.random(40)
    assert auroc(y, s) == pytest.approx(auroc(y, np.exp(3 * s) - 7), abs=1e-12)
    assert average_precision(y, s) == pytest.approx(average_precision(y, s**3), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_wf1_bounds_and_balanced_macro(seed):
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(3), 10)
    p = r.dirichlet(np.ones(3), 30)
    m = classification_metrics(y, p)
    assert 0 <= m["w_f1"] <= 1
    pred = p.argmax(1)
    f1s = []
    for c in range(3):
        tp = np.sum((pred == c) & (y == c))
        prec = tp / max(1, np.sum(pred == c))
        rec = tp / 10
        f1s.append(0 if tp == 0 else 2 * prec * rec / (prec + rec))
    assert m["w_f1"] == pytest.approx(np.mean(f1s), abs=1e-12)


# -- segmentation ----------------------------------------------------------------


def test_seg_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert seg_metrics(a, a) == {"dsc": 1.0, "jac": 1.0}
    assert seg_metrics(a, ~a) == {"dsc": 0.0, "jac": 0.0}
    c = np.zeros((4, 4), bool)
    c[:3] = True
    b = np.zeros((4, 4), bool)
    b[1:] = True
    m = seg_metrics(c, b)
    assert m["dsc"] == pytest.approx(2 / 3) and m["jac"] == pytest.approx(1 / 2)
    z = np.zeros((3, 3), bool)
    assert seg_metrics(z, z) == {"dsc": 1.0, "jac": 1.0}
    with pytest.raises(ShapeError):
        seg_metrics(z, a)


# -- bootstrap -----------------------------------------------------------------


def test_bootstrap_constant_sample():
    r = bootstrap_ci([5, 5, 5, 5])
    assert (r.point, r.lo, r.hi) == (5.0, 5.0, 5.0)
    with pytest.raises(ValidationError):
        bootstrap_ci([1.0])


@pytest.mark.parametrize("level", [0.95, 0.5])
def test_bootstrap_matches_exhaustive_enumeration(level):
    values = [1.0, 2.0, 7.0]
    lo, hi = exhaustive_bootstrap_bounds(values, level)
    r = bootstrap_ci(np.array(values), n=100000, level=level, seed=0)
    assert abs(r.lo - lo) <= 0.02 and abs(r.hi - hi) <= 0.02


def test_bootstrap_width_scales_and_is_deterministic():
    x = np.random.default_rng(0).normal(size=50)
    a = bootstrap_ci(x, seed=3)
    b = bootstrap_ci(2 * x, seed=3)
    ratio = (b.hi - b.lo) / (a.hi - a.lo)
    assert abs(ratio - 2) <= 0.3
    again = bootstrap_ci(x, seed=3)
    assert (again.lo, again.hi) == (a.lo, a.hi)
    assert a.lo <= a.point <= a.hi


def test_bootstrap_joint_rows_and_groups():
    y = np.array([0, 1] * 10)
    p = np.where(y == 1, 0.8, 0.2)
    r = bootstrap_ci((y, p), lambda a, b: float(np.mean(a == (b > 0.5))), n=200)
    assert r.point == r.lo == r.hi == 1.0
    g = np.repeat(np.arange(5), 4)
    r = bootstrap_ci(np.arange(20.0), n=200, groups=g)
    assert len(r.replicates) == 200
    with pytest.raises(ShapeError):
        bootstrap_ci((np.zeros(3), np.zeros(4)), lambda a, b: 0.0)


# -- permutation test ----------------------------------------------------------------


def test_permutation_identical_columns():
    a = np.random.default_rng(0).random(12)
    assert permutation_test(a, a.copy()) == 1.0
    with pytest.raises(ShapeError):
        permutation_test(a, a[:5])


def test_permutation_matches_exhaustive():
    r = np.random.default_rng(1)
    a = r.normal(0.4, 1, 10)
    b = r.normal(0.0, 1, 10)
    exact = exhaustive_permutation_p(a, b)
    assert abs(permutation_test(a, b, n=100000, seed=0) - exact) <= 0.01


def test_permutation_p_range():
    r = np.random.default_rng(2)
    p = permutation_test(r.random(8) + 10, r.random(8), n=99)
    assert p == pytest.approx(1 / 100)
    assert 0 < p <= 1


def test_permutation_false_positive_rate():
    r = np.random.default_rng(3)
    hits = 0
    for i in range(500):
        a, b = r.normal(size=(2, 20))
        hits += permutation_test(a, b, n=199, seed=i) < 0.05
    assert 0.03 <= hits / 500 <= 0.08


# -- t-test and helpers -----------------------------------------------------------


def test_ttest_textbook_and_identity():
    res = ttest_two_sided([1, 2, 3, 4, 5], [3, 4, 5, 6, 7])
    # means 3 and 5, both variances 2.5: t = -2 with 8 Welch degrees of freedom; table p 0.0805
    assert res.statistic == pytest.approx(-2.0, abs=1e-12)
    assert res.df == pytest.approx(8.0)
    assert abs(res.p - 0.0805) <= 1e-3
    same = ttest_two_sided([1, 2, 3], [1, 2, 3])
    assert same.statistic == 0.0 and same.p == 1.0


def test_ttest_paired_and_degenerate():
    a = np.array([1.0, 2.5, 3.0, 4.5])
    deg = ttest_two_sided(a, a - 1.0, paired=True)
    assert deg.degenerate and deg.p == 0.0 and deg.statistic == np.inf
    b = np.array([0.5, 2.0, 3.5, 3.0])
    d = a - b
    t = d.mean() / (d.std(ddof=1) / 2)
    assert ttest_two_sided(a, b, paired=True).statistic == pytest.approx(t)
    with pytest.raises(ValidationError):
        ttest_two_sided([1.0], [2.0, 3.0])


def test_bonferroni_fold_ci_stars():
    assert bonferroni([0.01, 0.2, 0.6]) == pytest.approx([0.03, 0.6, 1.0])
    mean, lo, hi = fold_ci([0.8, 0.9, 1.0])
    assert mean == pytest.approx(0.9) and hi - mean == pytest.approx(mean - lo)
    assert hi - lo == pytest.approx(2 * 1.96 * 0.1 / np.sqrt(3))
    assert [stars(p) for p in (0.0005, 0.005, 0.03, 0.2, None)] == ["***", "**", "*", "", ""]
    with pytest.raises(ValidationError):
        fold_ci([0.5])


def test_metric_reports_rows():
    r = np.random.default_rng(4)
    y = np.array([0, 1] * 20)
    good = np.clip(y * 0.6 + r.random(40) * 0.4, 0, 1)
    bad = r.random(40)
    reps = metric_reports(y, good, rivals={"noise": bad}, metrics=("auroc", "bacc"), n_bootstrap=200, n_permutations=200)
    assert [m.metric for m in reps] == ["auroc", "bacc"]
    for m in reps:
        assert m.ci_low <= m.point <= m.ci_high
        assert 0 < m.comparisons["noise"] <= 1
        row = m.row()
        assert row["sig_vs_noise"] == stars(row["p_vs_noise"])
    single = metric_reports([1, 1, 1], [0.2, 0.5, 0.9], metrics=("auroc",))
    assert single[0] == MetricReport("auroc", None, None, None, 0)
