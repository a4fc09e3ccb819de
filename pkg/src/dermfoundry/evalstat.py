"""Classification/segmentation metrics, bootstrap intervals and significance tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .core import ShapeError, ValidationError


# ---------------------------------------------------------------------------
# metrics


def auroc(y_true, scores) -> float | None:
    """Binary AUROC as the normalized Mann-Whitney statistic with mid-ranks."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        return None
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def average_precision(y_true, scores) -> float | None:
    """Step-wise area under the precision-recall curve."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every distinct threshold
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _as_prob_matrix(y_prob) -> np.ndarray:
    p = np.asarray(y_prob, dtype=np.float64)
    if p.ndim == 1:
        p = np.stack([1 - p, p], axis=1)
    if p.ndim != 2:
        raise ShapeError(f"expected (n, C) probabilities, got {p.shape}")
    return p


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def classification_metrics(y_true, y_prob) -> dict[str, Any]:
    """W_F1, AUROC, AUPR, BACC, sensitivity, specificity (plus accuracy).

    Predictions are the argmax with ties to the lowest class id. Multiclass
    AUROC/AUPR are one-vs-rest macro averages over classes present in
    ``y_true``; sensitivity/specificity are macro averages. Undefined values
    are ``None`` with an entry under ``reasons``.
    """
    y = np.asarray(y_true, dtype=np.int64)
    p = _as_prob_matrix(y_prob)
    if len(y) != len(p):
        raise ShapeError(f"{len(y)} labels vs {len(p)} prediction rows")
    C = p.shape[1]
    pred = np.argmax(p, axis=1)
    cm = confusion(y, pred, C)
    support = cm.sum(1)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_count > 0, tp / pred_count, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    n = support.sum()
    present = support > 0
    out: dict[str, Any] = {"reasons": {}}
    out["w_f1"] = float(np.sum(f1 * support) / n)
    out["accuracy"] = float(tp.sum() / n)
    out["bacc"] = float(recall[present].mean())
    tn = n - support - pred_count + tp
    neg = n - support
    spec = np.where(neg > 0, tn / np.maximum(neg, 1), 0.0)
    if C == 2:
        out["sensitivity"] = float(recall[1]) if support[1] else None
        out["specificity"] = float(recall[0]) if support[0] else None
        out["auroc"] = auroc(y == 1, p[:, 1])
        out["aupr"] = average_precision(y == 1, p[:, 1])
    else:
        out["sensitivity"] = float(recall[present].mean())
        out["specificity"] = float(spec[neg > 0].mean()) if np.any(neg > 0) else None
        aucs = [auroc(y == c, p[:, c]) for c in range(C) if present[c]]
        aps = [average_precision(y == c, p[:, c]) for c in range(C) if present[c]]
        aucs = [a for a in aucs if a is not None]
        out["auroc"] = float(np.mean(aucs)) if aucs else None
        out["aupr"] = float(np.mean(aps)) if aps else None
    if present.sum() < 2:
        out["auroc"] = None
        out["reasons"]["auroc"] = "y_true contains a single class"
    if out["sensitivity"] is None:
        out["reasons"]["sensitivity"] = "no positive samples"
    if out["specificity"] is None:
        out["reasons"]["specificity"] = "no negative samples"
    return out


def seg_metrics(mask_pred, mask_true) -> dict[str, float]:
    """Dice and Jaccard; two empty masks agree perfectly (1.0)."""
    a = np.asarray(mask_pred, dtype=bool)
    b = np.asarray(mask_true, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    total = a.sum() + b.sum()
    if total == 0:
        return {"dsc": 1.0, "jac": 1.0}
    return {"dsc": float(2 * inter / total), "jac": float(inter / union)}


# ---------------------------------------------------------------------------
# resampling


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lo: float
    hi: float
    n_resamples: int
    replicates: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))


def _rows(data) -> tuple[tuple[np.ndarray, ...], bool]:
    if isinstance(data, tuple):
        arrays = tuple(np.asarray(d) for d in data)
        n = len(arrays[0])
        if any(len(a) != n for a in arrays):
            raise ShapeError("bootstrap arrays must share their first dimension")
        return arrays, True
    return (np.asarray(data),), False


def bootstrap_ci(
    samples,
    statistic: Callable[..., float] = np.mean,
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    groups: Sequence | None = None,
) -> BootstrapResult:
    """Percentile bootstrap interval.

    ``samples`` is one array or a tuple of aligned arrays (e.g. labels and
    probabilities) resampled jointly by row. With ``groups`` whole groups are
    resampled (e.g. patients instead of images).
    """
    arrays, multi = _rows(samples)
    size = len(arrays[0])
    if size < 2:
        raise ValidationError("bootstrap needs at least 2 samples")

    def call(idx):
        parts = tuple(a[idx] for a in arrays)
        return statistic(*parts) if multi else statistic(parts[0])

    point = float(call(np.arange(size)))
    rng = np.random.default_rng(seed)
    if groups is None:
        idx = rng.integers(0, size, size=(n, size))
        reps = np.array([call(i) for i in idx], dtype=np.float64)
    else:
        g = np.asarray(groups)
        uniq, inv = np.unique(g, return_inverse=True)
        members = [np.flatnonzero(inv == k) for k in range(len(uniq))]
        picks = rng.integers(0, len(uniq), size=(n, len(uniq)))
        reps = np.array([call(np.concatenate([members[k] for k in row])) for row in picks], dtype=np.float64)
    reps_ok = reps[np.isfinite(reps)]
    alpha = (1 - level) / 2
    lo, hi = np.quantile(reps_ok, [alpha, 1 - alpha])
    return BootstrapResult(point, float(lo), float(hi), n, reps)


def permutation_test(
    scores_a,
    scores_b,
    statistic: Callable[[np.ndarray, np.ndarray], float] | None = None,
    n: int = 1000,
    seed: int = 0,
) -> float:
    """Paired permutation test swapping (a_i, b_i) per sample.

    ``statistic(a, b)`` defaults to the mean difference. Two-sided
    p = (1 + #{|T_perm| >= |T_obs|}) / (n + 1).
    """
    a = np.asarray(scores_a)
    b = np.asarray(scores_b)
    if a.shape != b.shape:
        raise ShapeError(f"paired scores differ in shape: {a.shape} vs {b.shape}")
    if statistic is None:
        statistic = lambda x, y: float(np.mean(x) - np.mean(y))  # noqa: E731
    observed = abs(statistic(a, b))
    rng = np.random.default_rng(seed)
    swaps = rng.random((n, len(a))) < 0.5
    extra = (1,) * (a.ndim - 1)
    hits = 0
    # tolerance guards float noise when a permutation reproduces the observed split
    tol = 1e-12 * max(1.0, observed)
    for s in swaps:
        sw = s.reshape((-1,) + extra)
        pa = np.where(sw, b, a)
        pb = np.where(sw, a, b)
        if abs(statistic(pa, pb)) >= observed - tol:
            hits += 1
    return (1 + hits) / (n + 1)


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p: float
    df: float
    degenerate: bool = False


def ttest_two_sided(a, b, paired: bool = False) -> TTestResult:
    """Welch (default) or paired two-sided t-test.

    Zero-variance data with a nonzero mean difference is degenerate: the
    statistic is infinite and p is 0, flagged via ``degenerate``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if paired:
        if a.shape != b.shape:
            raise ShapeError("paired t-test needs equal-length samples")
        if len(a) < 2:
            raise ValidationError("paired t-test needs at least 2 pairs")
        d = a - b
        n = len(d)
        mean = d.mean()
        sd = d.std(ddof=1)
        df = n - 1
        if sd == 0:
            if mean == 0:
                return TTestResult(0.0, 1.0, df, True)
            return TTestResult(float(np.sign(mean) * np.inf), 0.0, df, True)
        t = mean / (sd / np.sqrt(n))
    else:
        if len(a) < 2 or len(b) < 2:
            raise ValidationError("t-test needs at least 2 observations per group")
        va = a.var(ddof=1) / len(a)
        vb = b.var(ddof=1) / len(b)
        diff = a.mean() - b.mean()
        se2 = va + vb
        if se2 == 0:
            df = len(a) + len(b) - 2
            if diff == 0:
                return TTestResult(0.0, 1.0, df, True)
            return TTestResult(float(np.sign(diff) * np.inf), 0.0, df, True)
        t = diff / np.sqrt(se2)
        df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = float(2 * stats.t.sf(abs(t), df))
    return TTestResult(float(t), min(1.0, p), float(df))


def bonferroni(pvalues: Sequence[float]) -> list[float]:
    m = len(pvalues)
    return [min(1.0, p * m) for p in pvalues]


def fold_ci(values: Sequence[float], z: float = 1.96) -> tuple[float, float, float]:
    """Mean over folds with mean +/- z * (sd / sqrt(k))."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        raise ValidationError("need at least 2 folds")
    mean = v.mean()
    se = v.std(ddof=1) / np.sqrt(len(v))
    return float(mean), float(mean - z * se), float(mean + z * se)


def stars(p: float | None) -> str:
    if p is None:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class MetricReport:
    metric: str
    point: float | None
    ci_low: float | None
    ci_high: float | None
    n_resamples: int
    comparisons: Mapping[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, Any]:
        d = {
            "metric": self.metric,
            "point": self.point,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_resamples": self.n_resamples,
        }
        for rival, p in sorted(self.comparisons.items()):
            d[f"p_vs_{rival}"] = p
            d[f"sig_vs_{rival}"] = stars(p)
        return d


METRIC_KEYS = ("w_f1", "auroc", "bacc", "aupr", "sensitivity", "specificity")


def metric_fn(name: str) -> Callable[[np.ndarray, np.ndarray], float]:
    def fn(y, p):
        v = classification_metrics(y, p)[name]
        return np.nan if v is None else v

    return fn


def metric_reports(
    y_true,
    y_prob,
    rivals: Mapping[str, np.ndarray] | None = None,
    metrics: Sequence[str] = METRIC_KEYS,
    n_bootstrap: int = 1000,
    n_permutations: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    groups=None,
) -> list[MetricReport]:
    """One MetricReport per metric with bootstrap CI and permutation p-values vs rivals."""
    y = np.asarray(y_true)
    p = _as_prob_matrix(y_prob)
    out = []
    for name in metrics:
        fn = metric_fn(name)
        point = fn(y, p)
        if not np.isfinite(point):
            out.append(MetricReport(name, None, None, None, 0))
            continue
        bs = bootstrap_ci((y, p), fn, n=n_bootstrap, level=level, seed=seed, groups=groups)
        comps = {}
        for rival, rp in (rivals or {}).items():
            rp = _as_prob_matrix(rp)
            comps[rival] = permutation_test(
                p, rp, lambda a, b: fn(y, a) - fn(y, b), n=n_permutations, seed=seed
            )
        out.append(MetricReport(name, bs.point, bs.lo, bs.hi, n_bootstrap, comps))
    return out
