"""Kaplan-Meier, log-rank, median-split stratification, Cox regression and time-dependent AUC."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .core import DermFoundryError, ValidationError


class CoxConvergenceError(DermFoundryError):
    pass


@dataclass(frozen=True)
class SurvivalRecord:
    patient_id: str
    time: float
    event: bool
    score: float = 0.0
    covariates: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.time) or self.time <= 0:
            raise ValidationError(f"record {self.patient_id}: time must be > 0, got {self.time}")
        object.__setattr__(self, "event", bool(self.event))


def _arrays(records: Sequence[SurvivalRecord]):
    t = np.array([r.time for r in records], dtype=np.float64)
    e = np.array([r.event for r in records], dtype=bool)
    return t, e


# ---------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KMCurve:
    times: np.ndarray  # distinct observed times, ascending
    survival: np.ndarray  # S(t) just after each time
    at_risk: np.ndarray
    events: np.ndarray
    censored: np.ndarray

    def __call__(self, t) -> np.ndarray | float:
        """Right-continuous step evaluation; S = 1 before the first time."""
        t_arr = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t_arr, side="right") - 1
        out = np.where(idx < 0, 1.0, self.survival[np.clip(idx, 0, None)])
        return float(out) if out.ndim == 0 else out

    def left_limit(self, t) -> np.ndarray | float:
        """S(t-), the survival just before ``t``."""
        t_arr = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.times, t_arr, side="left") - 1
        out = np.where(idx < 0, 1.0, self.survival[np.clip(idx, 0, None)])
        return float(out) if out.ndim == 0 else out

    def rows(self):
        for row in zip(self.times, self.survival, self.at_risk, self.events):
            yield [float(row[0]), float(row[1]), int(row[2]), int(row[3])]


def km_from_arrays(time: np.ndarray, event: np.ndarray) -> KMCurve:
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    if time.size == 0:
        raise ValidationError("Kaplan-Meier needs at least one record")
    uniq = np.unique(time)
    d = np.array([np.sum(event & (time == u)) for u in uniq])
    c = np.array([np.sum(~event & (time == u)) for u in uniq])
    n = np.array([np.sum(time >= u) for u in uniq])
    s = np.cumprod((n - d) / n)
    return KMCurve(uniq, s, n, d, c)


def km_estimate(records: Sequence[SurvivalRecord]) -> KMCurve:
    """Product-limit estimate; censored subjects leave the risk set without a step."""
    if len(records) == 0:
        raise ValidationError("Kaplan-Meier needs at least one record")
    return km_from_arrays(*_arrays(records))


# ---------------------------------------------------------------------------
# log-rank


@dataclass(frozen=True)
class LogRankResult:
    statistic: float
    p: float
    observed_a: float
    expected_a: float
    variance: float


def logrank_test(group_a: Sequence[SurvivalRecord], group_b: Sequence[SurvivalRecord]) -> LogRankResult:
    if len(group_a) == 0 or len(group_b) == 0:
        raise ValidationError("log-rank test needs subjects in both groups")
    ta, ea = _arrays(group_a)
    tb, eb = _arrays(group_b)
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    event_times = np.unique(t[e])
    obs = exp = var = 0.0
    for u in event_times:
        na = np.sum(ta >= u)
        nb = np.sum(tb >= u)
        n = na + nb
        da = np.sum(ea & (ta == u))
        d = da + np.sum(eb & (tb == u))
        obs += da
        exp += d * na / n
        if n > 1:
            var += d * (na / n) * (nb / n) * (n - d) / (n - 1)
    if var <= 0:
        return LogRankResult(0.0, 1.0, obs, exp, var)
    chi2 = (obs - exp) ** 2 / var
    return LogRankResult(float(chi2), float(stats.chi2.sf(chi2, 1)), obs, exp, var)


def stratify_median(records: Sequence[SurvivalRecord]):
    """Split at the median score; ties at the median go to the low group."""
    if len(records) < 2:
        raise ValidationError("median split needs at least 2 records")
    scores = np.array([r.score for r in records], dtype=np.float64)
    med = np.median(scores)
    low = [r for r, s in zip(records, scores) if s <= med]
    high = [r for r, s in zip(records, scores) if s > med]
    return low, high


# ---------------------------------------------------------------------------
# Cox proportional hazards


@dataclass(frozen=True)
class CoxTerm:
    term: str
    coef: float
    se: float
    hr: float
    lo: float
    hi: float
    p: float
    note: str = ""

    def row(self):
        return [self.term, self.hr, self.lo, self.hi, self.p]


@dataclass(frozen=True)
class CoxResult:
    terms: tuple[CoxTerm, ...]
    loglik: float
    iterations: int
    gradient_norm: float
    separated: bool = False
    reference_levels: Mapping[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> CoxTerm:
        for t in self.terms:
            if t.term == name:
                return t
        raise KeyError(name)

    @property
    def coef(self) -> np.ndarray:
        return np.array([t.coef for t in self.terms])


def design_matrix(records: Sequence[SurvivalRecord], covariates: Sequence[str]):
    """Numeric covariates as-is; non-numeric ones one-hot against their most frequent level."""
    cols, names, refs = [], [], {}
    for cov in covariates:
        try:
            values = [r.covariates[cov] for r in records]
        except KeyError:
            raise ValidationError(f"covariate {cov!r} missing from a record") from None
        numeric = all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in values)
        if numeric or all(isinstance(v, bool) for v in values):
            arr = np.asarray(values, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"covariate {cov!r} has non-finite values")
            cols.append(arr)
            names.append(cov)
            continue
        levels = [str(v) for v in values]
        counts = Counter(levels)
        ref = sorted(counts, key=lambda k: (-counts[k], k))[0]
        refs[cov] = ref
        for lvl in sorted(counts):
            if lvl == ref:
                continue
            cols.append(np.array([lv == lvl for lv in levels], dtype=np.float64))
            names.append(f"{cov}[{lvl}]")
    X = np.column_stack(cols) if cols else np.zeros((len(records), 0))
    return X, names, refs


def breslow_loglik(beta: np.ndarray, X: np.ndarray, time: np.ndarray, event: np.ndarray):
    """Breslow partial log-likelihood, its gradient and Hessian."""
    order = np.argsort(-time, kind="stable")
    Xs, ts, es = X[order], time[order], event[order]
    eta = Xs @ beta
    shift = eta.max() if eta.size else 0.0
    w = np.exp(eta - shift)
    # cumulative sums over the risk set (time >= t), sorted descending so a prefix is a risk set
    S0 = np.cumsum(w)
    S1 = np.cumsum(w[:, None] * Xs, axis=0)
    S2 = np.cumsum(w[:, None, None] * Xs[:, :, None] * Xs[:, None, :], axis=0)
    # the risk set of a tied time includes every tie: use the last index of each tie block
    last = np.searchsorted(-ts, -ts, side="right") - 1
    ll = 0.0
    p = X.shape[1]
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    for i in np.flatnonzero(es):
        j = last[i]
        mean = S1[j] / S0[j]
        ll += eta[i] - shift - np.log(S0[j])
        grad += Xs[i] - mean
        hess -= S2[j] / S0[j] - np.outer(mean, mean)
    return ll, grad, hess


def cox_fit(
    records: Sequence[SurvivalRecord],
    covariates: Sequence[str],
    max_iter: int = 100,
    tol: float = 1e-8,
    separation_bound: float = 25.0,
) -> CoxResult:
    """Newton-Raphson maximization of the Breslow partial likelihood."""
    if len(records) == 0:
        raise ValidationError("Cox regression needs records")
    time, event = _arrays(records)
    if not event.any():
        raise ValidationError("Cox regression needs at least one event")
    X, names, refs = design_matrix(records, covariates)
    p = X.shape[1]
    constant = np.array([np.ptp(X[:, k]) == 0 for k in range(p)], dtype=bool)
    active = np.flatnonzero(~constant)
    Xa = X[:, active]
    sd = Xa.std(axis=0)
    beta = np.zeros(len(active))
    ll, grad, hess = breslow_loglik(beta, Xa, time, event)
    info0 = np.diag(-hess).copy()
    separated = False
    it = 0
    last_step = np.full(len(active), np.inf)
    # a monotone likelihood has a vanishing gradient but steady Newton steps, so both must settle
    while np.linalg.norm(grad) >= tol or np.max(np.abs(last_step * sd), initial=0.0) > 1e-6:
        if it >= max_iter:
            raise CoxConvergenceError(
                f"Cox fit did not converge in {max_iter} iterations (gradient norm {np.linalg.norm(grad):.3e})"
            )
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        # step halving keeps each update an ascent step
        for _ in range(60):
            cand = beta + step
            ll_new, g_new, h_new = breslow_loglik(cand, Xa, time, event)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            step = step / 2
        last_step = cand - beta
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        if np.max(np.abs(beta * sd), initial=0.0) > separation_bound:
            separated = True
            break
    # information that collapsed to nothing means the estimate ran off to infinity
    if not separated and np.any(np.diag(-hess) <= 1e-12 * info0):
        separated = True
    cov = np.full((len(active), len(active)), np.nan)
    if not separated:
        try:
            cov = np.linalg.inv(-hess)
        except np.linalg.LinAlgError:
            pass
    terms = []
    z975 = stats.norm.ppf(0.975)
    full_beta = np.zeros(p)
    full_beta[active] = beta
    for k, name in enumerate(names):
        if constant[k]:
            terms.append(CoxTerm(name, 0.0, np.inf, 1.0, 0.0, np.inf, 1.0, "constant covariate"))
            continue
        a = int(np.flatnonzero(active == k)[0])
        b = float(beta[a])
        se = float(np.sqrt(cov[a, a])) if np.isfinite(cov[a, a]) and cov[a, a] > 0 else np.nan
        if separated:
            terms.append(CoxTerm(name, b, np.nan, float(np.exp(b)), np.nan, np.nan, np.nan, "separation"))
            continue
        pval = float(2 * stats.norm.sf(abs(b / se))) if np.isfinite(se) and se > 0 else np.nan
        terms.append(
            CoxTerm(name, b, se, float(np.exp(b)), float(np.exp(b - z975 * se)), float(np.exp(b + z975 * se)), pval)
        )
    return CoxResult(tuple(terms), float(ll), it, float(np.linalg.norm(grad)), separated, refs)


# ---------------------------------------------------------------------------
# time-dependent AUC


@dataclass(frozen=True)
class HorizonAUC:
    horizon: float
    auc: float | None
    n_cases: int
    n_controls: int
    reason: str = ""

    def row(self):
        return [self.horizon, self.auc, self.n_cases, self.n_controls, self.reason]


def time_dependent_auc(
    records: Sequence[SurvivalRecord],
    horizons: Iterable[float] = (36, 60, 84),
    ipcw: bool = True,
) -> list[HorizonAUC]:
    """Cumulative-case / dynamic-control AUC at each horizon.

    Cases have an observed event at or before the horizon and are weighted
    by 1/G(T-), with G the Kaplan-Meier estimate of the censoring
    distribution; controls are still event-free after the horizon and share
    the common weight 1/G(horizon), which cancels. With ``ipcw=False`` every
    pair counts equally.
    """
    time, event = _arrays(records)
    score = np.array([r.score for r in records], dtype=np.float64)
    G = km_from_arrays(time, ~event) if ipcw else None
    out = []
    for h in horizons:
        h = float(h)
        case = event & (time <= h)
        ctrl = time > h
        nc, nk = int(case.sum()), int(ctrl.sum())
        if nc == 0 or nk == 0:
            why = "no cases" if nc == 0 else "no controls"
            out.append(HorizonAUC(h, None, nc, nk, f"{why} at horizon {h:g}"))
            continue
        if ipcw:
            g = np.asarray(G.left_limit(time[case]), dtype=np.float64)
            if np.any(g <= 0):
                out.append(HorizonAUC(h, None, nc, nk, "censoring survival reaches zero before a case"))
                continue
            w = 1.0 / g
        else:
            w = np.ones(nc)
        sc = score[case][:, None]
        sk = score[ctrl][None, :]
        conc = (sc > sk).sum(axis=1) + 0.5 * (sc == sk).sum(axis=1)
        auc = float(np.sum(w * conc) / (np.sum(w) * nk))
        out.append(HorizonAUC(h, auc, nc, nk))
    return out


def records_from_rows(rows: Iterable[Mapping[str, str]], covariates: Sequence[str] = ()) -> list[SurvivalRecord]:
    """Build records from CSV dict rows (patient_id, time_months, event, score, covariates...)."""
    out = []
    for row in rows:
        try:
            ev = str(row["event"]).strip().lower()
            event = ev in ("1", "true", "yes")
            if not event and ev not in ("0", "false", "no"):
                raise ValidationError(f"unrecognized event value {row['event']!r}")
            covs = {}
            for c in covariates:
                v = row[c]
                try:
                    covs[c] = float(v)
                except (TypeError, ValueError):
                    covs[c] = str(v)
            out.append(SurvivalRecord(str(row["patient_id"]), float(row["time_months"]), event, float(row.get("score", 0) or 0), covs))
        except KeyError as exc:
            raise ValidationError(f"survival table missing column {exc.args[0]!r}") from None
    return out
