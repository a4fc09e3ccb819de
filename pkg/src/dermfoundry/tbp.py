"""Total-body-photography screening: lesion filter, risk head, ugly-duckling detector,
tabular extra-trees model and the OR combiner."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from sklearn.tree import ExtraTreeClassifier

from .core import ValidationError, derive_seed

log = logging.getLogger(__name__)

MEASUREMENTS: tuple[str, ...] = (
    "A",
    "Aext",
    "B",
    "Bext",
    "C",
    "Cext",
    "H",
    "Hext",
    "L",
    "Lext",
    "areaMM2",
    "area_perim_ratio",
    "color_std_mean",
    "deltaA",
    "deltaB",
    "deltaL",
    "deltaLB",
    "deltaLBnorm",
    "dnn_lesion_confidence",
    "eccentricity",
    "location_simple",
    "majorAxisMM",
    "minorAxisMM",
    "nevi_confidence",
    "norm_border",
    "norm_color",
    "perimeterMM",
    "radial_color_std_max",
    "stdL",
    "stdLExt",
    "symm_2axis",
    "symm_2axis_angle",
)

CATEGORICAL = ("location_simple",)

# (field, comparison, bound)
FILTER_RULES: tuple[tuple[str, str, float], ...] = (
    ("majorAxisMM", ">=", 2.0),
    ("deltaLBnorm", ">=", 4.5),
    ("out_of_bounds_fraction", "<=", 0.25),
    ("dnn_lesion_confidence", ">=", 50.0),
    ("nevi_confidence", ">", 80.0),
)

_OPS = {
    ">=": lambda v, b: v >= b,
    "<=": lambda v, b: v <= b,
    ">": lambda v, b: v > b,
}


@dataclass(frozen=True)
class LesionRecord:
    lesion_id: str
    patient_id: str
    measurements: Mapping[str, Any]
    tile_ref: str = ""
    label_risk: bool | None = None
    label_malignant: bool | None = None
    extras: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        missing = [k for k in MEASUREMENTS if k not in self.measurements]
        if missing:
            raise ValidationError(f"lesion {self.lesion_id}: missing measurement column(s) {missing}")

    def value(self, name: str):
        if name in self.measurements:
            return self.measurements[name]
        return self.extras.get(name)


def check_unique(records: Sequence[LesionRecord]) -> None:
    seen = set()
    for r in records:
        if r.lesion_id in seen:
            raise ValidationError(f"duplicate lesion_id {r.lesion_id!r}")
        seen.add(r.lesion_id)


def _is_null(v) -> bool:
    return v is None or (isinstance(v, float) and np.isnan(v)) or (isinstance(v, str) and v.strip() == "")


def filter_reason(record: LesionRecord) -> str | None:
    """None when the lesion passes every rule, else the first failing rule."""
    for name, op, bound in FILTER_RULES:
        v = record.value(name)
        if _is_null(v):
            return f"{name} is null"
        if not _OPS[op](float(v), bound):
            return f"{name}={v} fails {op} {bound:g}"
    return None


def filter_lesions(records: Sequence[LesionRecord]) -> list[LesionRecord]:
    kept = []
    for r in records:
        why = filter_reason(r)
        if why is None:
            kept.append(r)
        else:
            log.debug("dropping lesion %s: %s", r.lesion_id, why)
    return kept


# ---------------------------------------------------------------------------
# ugly duckling


@dataclass(frozen=True)
class UDResult:
    positives: frozenset[str]
    distances: Mapping[str, float]
    thresholds: Mapping[str, float]
    too_few: frozenset[str]  # patients with fewer lesions than the minimum


def tukey_upper_fence(values: np.ndarray, k: float = 1.5) -> float:
    q1, q3 = np.percentile(values, [25, 75], method="linear")
    return float(q3 + k * (q3 - q1))


def ud_outliers(
    features: np.ndarray,
    lesion_ids: Sequence[str],
    patient_ids: Sequence[str],
    k: float = 1.5,
    min_lesions: int = 4,
) -> UDResult:
    """Flag lesions whose distance to their patient's mean feature is an upper-tail IQR outlier."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(lesion_ids) or len(X) != len(patient_ids):
        raise ValidationError("features, lesion ids and patient ids must align")
    pids = np.asarray([str(p) for p in patient_ids])
    positives, distances, fences, few = set(), {}, {}, set()
    for p in sorted(set(pids.tolist())):
        idx = np.flatnonzero(pids == p)
        d = np.linalg.norm(X[idx] - X[idx].mean(axis=0), axis=1)
        for i, di in zip(idx, d):
            distances[lesion_ids[i]] = float(di)
        if len(idx) < min_lesions:
            few.add(p)
            continue
        fence = tukey_upper_fence(d, k)
        fences[p] = fence
        positives.update(lesion_ids[i] for i, di in zip(idx, d) if di > fence)
    return UDResult(frozenset(positives), distances, fences, frozenset(few))


# ---------------------------------------------------------------------------
# tabular model


@dataclass
class MetadataModel:
    """Extremely randomized trees averaged over a fixed feature-name order."""

    feature_names: tuple[str, ...]
    trees: list[ExtraTreeClassifier]
    categories: dict[str, list[str]]

    def matrix(self, rows: Sequence[Mapping[str, Any]]) -> np.ndarray:
        return _encode(rows, self.feature_names, self.categories)

    def predict_proba(self, rows: Sequence[Mapping[str, Any]]) -> np.ndarray:
        X = self.matrix(rows)
        out = np.zeros(len(X))
        for t in self.trees:
            pr = t.predict_proba(X)
            cls = list(t.classes_)
            out += pr[:, cls.index(1)] if 1 in cls else 0.0
        return out / len(self.trees)


def _encode(rows, names, categories) -> np.ndarray:
    X = np.full((len(rows), len(names)), np.nan)
    for j, n in enumerate(names):
        for i, r in enumerate(rows):
            v = r.get(n)
            if _is_null(v):
                continue  # trees route nulls explicitly; no imputation
            if n in categories:
                X[i, j] = categories[n].index(str(v)) if str(v) in categories[n] else -1
            else:
                X[i, j] = float(v)
    return X


def _rows(records) -> list[Mapping[str, Any]]:
    return [r.measurements if isinstance(r, LesionRecord) else r for r in records]


def fit_metadata_model(
    records: Sequence[LesionRecord | Mapping[str, Any]],
    labels: Sequence[int] | None = None,
    feature_names: Sequence[str] = MEASUREMENTS,
    n_trees: int = 200,
    max_depth: int | None = None,
    max_features: str | int | float | None = "sqrt",
    splitter: str = "random",
    seed: int = 0,
) -> MetadataModel:
    if labels is None:
        labels = [r.label_malignant for r in records]
    if any(lbl is None for lbl in labels):
        raise ValidationError("metadata model needs a malignancy label on every training row")
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValidationError("metadata model training labels are all one class")
    rows = _rows(records)
    names = tuple(feature_names)
    categories = {}
    for n in names:
        vals = [r.get(n) for r in rows if not _is_null(r.get(n))]
        if n in CATEGORICAL or any(isinstance(v, str) and not _numeric(v) for v in vals):
            categories[n] = sorted({str(v) for v in vals})
    X = _encode(rows, names, categories)
    trees = []
    for t in range(n_trees):
        tree = ExtraTreeClassifier(
            splitter=splitter,
            max_depth=max_depth,
            max_features=max_features,
            random_state=derive_seed(seed, "extra-tree", t) % (2**31),
        )
        trees.append(tree.fit(X, y))
    return MetadataModel(names, trees, categories)


def _numeric(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def predict_metadata(model: MetadataModel, records: Sequence[LesionRecord | Mapping[str, Any]]) -> np.ndarray:
    return model.predict_proba(_rows(records))


# ---------------------------------------------------------------------------
# combination and reporting


@dataclass(frozen=True)
class ScreeningDecision:
    lesion_id: str
    risk_positive: bool
    ud_positive: bool
    ml_positive: bool
    suspicious: bool

    def row(self):
        return [self.lesion_id, int(self.risk_positive), int(self.ud_positive), int(self.ml_positive), int(self.suspicious)]


DECISION_COLUMNS = ["lesion_id", "risk_positive", "ud_positive", "ml_positive", "suspicious"]


def combine(
    risk: Mapping[str, bool] | None,
    ud: Mapping[str, bool] | None,
    ml: Mapping[str, bool] | None = None,
) -> list[ScreeningDecision]:
    """Per-lesion OR over the enabled modules (pass None to disable one)."""
    modules = {k: v for k, v in (("risk", risk), ("ud", ud), ("ml", ml)) if v is not None}
    if not modules:
        raise ValidationError("at least one screening module must be enabled")
    ids = None
    for name, m in modules.items():
        if ids is None:
            ids = list(m)
            ref = set(ids)
        elif set(m) != ref:
            diff = sorted(ref.symmetric_difference(m))[:5]
            raise ValidationError(f"lesion ids of module {name!r} do not match: {diff}")
    out = []
    for i in ids:
        r = bool(risk[i]) if risk is not None else False
        u = bool(ud[i]) if ud is not None else False
        m = bool(ml[i]) if ml is not None else False
        out.append(ScreeningDecision(i, r, u, m, r or u or m))
    return out


def _safe_ratio(a: int, b: int):
    return a / b if b else None


def screen_report(
    decisions: Sequence[ScreeningDecision],
    records: Sequence[LesionRecord],
) -> dict[str, Any]:
    """Lesion-level sensitivity/precision per label kind and patient-level detection."""
    by_id = {r.lesion_id: r for r in records}
    flagged = {d.lesion_id for d in decisions if d.suspicious}
    out: dict[str, Any] = {"n_lesions": len(decisions), "flagged_count": len(flagged)}
    for kind in ("malignant", "risk"):
        pos = {d.lesion_id for d in decisions if getattr(by_id[d.lesion_id], f"label_{kind}")}
        tp = len(pos & flagged)
        out[f"lesion_{kind}"] = {
            "positives": len(pos),
            "detected": tp,
            "sensitivity": _safe_ratio(tp, len(pos)),
            "precision": _safe_ratio(tp, len(flagged)),
        }
    patients: dict[str, bool] = {}
    for d in decisions:
        r = by_id[d.lesion_id]
        if r.label_malignant:
            patients[r.patient_id] = patients.get(r.patient_id, False) or d.suspicious
    caught = sum(patients.values())
    out["patient_malignant"] = {
        "patients": len(patients),
        "detected": caught,
        "sensitivity": _safe_ratio(caught, len(patients)),
    }
    return out


def records_from_rows(rows: Iterable[Mapping[str, str]]) -> list[LesionRecord]:
    """Lesion CSV rows to records; empty cells become explicit nulls."""

    def num(v):
        if _is_null(v):
            return None
        try:
            return float(v)
        except ValueError:
            return str(v)

    def flag(v):
        if _is_null(v):
            return None
        return str(v).strip().lower() in ("1", "true", "yes")

    out = []
    for row in rows:
        if "lesion_id" not in row or "patient_id" not in row:
            raise ValidationError("lesion table needs lesion_id and patient_id columns")
        meas = {}
        for k in MEASUREMENTS:
            if k not in row:
                raise ValidationError(f"lesion table missing measurement column {k!r}")
            meas[k] = num(row[k]) if k not in CATEGORICAL else (None if _is_null(row[k]) else str(row[k]))
        known = set(MEASUREMENTS) | {"lesion_id", "patient_id", "tile_ref", "label_risk", "label_malignant"}
        extras = {k: num(v) for k, v in row.items() if k not in known}
        out.append(
            LesionRecord(
                str(row["lesion_id"]),
                str(row["patient_id"]),
                meas,
                row.get("tile_ref", "") or "",
                flag(row.get("label_risk")),
                flag(row.get("label_malignant")),
                extras,
            )
        )
    check_unique(out)
    return out


def synthetic_lesions(n_patients: int, per_patient: int, rng: np.random.Generator) -> list[LesionRecord]:
    """Synthetic lesion table; malignant iff deltaLBnorm > 7."""
    out = []
    locs = ["torso", "head", "arm", "leg"]
    for p in range(n_patients):
        for j in range(per_patient):
            m = {k: float(rng.normal(0, 1)) for k in MEASUREMENTS}
            m["location_simple"] = locs[rng.integers(len(locs))]
            m["majorAxisMM"] = float(rng.uniform(1.8, 8))
            m["deltaLBnorm"] = float(rng.uniform(4.2, 10))
            m["dnn_lesion_confidence"] = float(rng.uniform(47, 100))
            m["nevi_confidence"] = float(rng.uniform(78, 100))
            out.append(
                LesionRecord(
                    f"p{p}_l{j}",
                    f"p{p}",
                    m,
                    label_risk=bool(rng.random() < 0.2),
                    label_malignant=m["deltaLBnorm"] > 7,
                    extras={"out_of_bounds_fraction": float(rng.uniform(0, 0.27))},
                )
            )
    return out
