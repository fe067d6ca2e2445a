"""Discrimination metrics, selective-prediction curves, slopes, severity
grades, age-band risk summaries, and the longitudinal warning rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

# Severity bands in dB: label -> (low_exclusive, high_inclusive_or_open)
DEFAULT_SEVERITY_BANDS = (
    ("normal", -2.0),     # md > -2
    ("early", -6.0),      # -6 < md <= -2
    ("moderate", -11.0),  # -11 < md <= -6
    ("advanced", None),   # md <= -11
)

DEFAULT_AGE_BANDS = ((30.0, 50.0), (50.0, 70.0), (70.0, 90.0))

WARN_ABS_THRESHOLD = 0.5    # fire when risk reaches this level
WARN_RISE_THRESHOLD = 0.10  # or when risk rises this much over two visits


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC from a score-descending sweep.

    Ties are grouped, which makes this equal to the Mann-Whitney statistic
    with 0.5 credit for tied pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc undefined: both classes must be present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = (labels[order] == 1).astype(np.float64)
    # indices where a run of tied scores ends
    last_of_run = np.flatnonzero(np.diff(s) != 0)
    last_of_run = np.append(last_of_run, s.size - 1)
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    return float(np.trapezoid(tpr, fpr))


def metrics_at_threshold(scores, labels, threshold: float) -> dict[str, float]:
    """Confusion-derived rates with the score >= threshold positive rule."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    if not pos.any() or not neg.any():
        raise DataError("metrics undefined: both classes must be present")
    pred = scores >= threshold
    tp = int((pred & pos).sum())
    fn = int((~pred & pos).sum())
    tn = int((~pred & neg).sum())
    fp = int((pred & neg).sum())
    # sensitivity written as 1 - FNR so it ties bitwise to the fairness module
    sens = 1.0 - fn / (fn + tp)
    spec = tn / (tn + fp)
    acc = (tp + tn) / labels.size
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    return {"accuracy": acc, "sensitivity": sens, "specificity": spec, "f1": f1}


def coverage_accuracy_curve(
    uncertainties,
    scores,
    labels,
    sample_ids=None,
    coverages=None,
    threshold: float = 0.5,
) -> list[tuple[float, float]]:
    """(coverage, accuracy) points retaining the ceil(c*n) lowest-U samples.

    Ties in U break by sample_id so the retained sets are a deterministic,
    nested family as coverage grows.
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = u.size
    if sample_ids is None:
        sample_ids = np.arange(n)
    if coverages is None:
        coverages = [round(0.50 + 0.05 * i, 2) for i in range(11)]
    order = np.lexsort((np.asarray(sample_ids), u))
    correct = ((scores >= threshold).astype(int) == labels)[order]
    cum_correct = np.cumsum(correct)
    points = []
    for c in coverages:
        k = int(np.ceil(c * n))
        k = min(max(k, 1), n)
        points.append((float(c), float(cum_correct[k - 1] / k)))
    return points


def ols_slope(times, values) -> float:
    """Closed-form least-squares slope of values on times."""
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if t.size < 2 or np.all(t == t[0]):
        raise DataError("ols_slope needs at least 2 distinct times")
    tc = t - t.mean()
    return float((tc * (v - v.mean())).sum() / (tc * tc).sum())


def eligibility_filter(visit_times) -> bool:
    """True when there are >= 3 visits spanning >= 1.0 year."""
    t = np.asarray(visit_times, dtype=np.float64)
    return t.size >= 3 and float(t.max() - t.min()) >= 1.0


def grade_md(md: float, bands=DEFAULT_SEVERITY_BANDS) -> str:
    for name, floor in bands:
        if floor is None or md > floor:
            return name
    return bands[-1][0]


def severity_outputs(md_hat: float, p_final: float, md_passes=None) -> dict:
    """Grade plus defect and moderate-to-severe probabilities.

    mts_prob is the fraction of ensemble md passes at or below -6 dB; with no
    ensemble it degrades to the indicator md_hat < -6.
    """
    if md_passes is not None and len(md_passes):
        mts = float(np.mean(np.asarray(md_passes, dtype=np.float64) <= -6.0))
    else:
        mts = float(md_hat < -6.0)
    return {"grade": grade_md(md_hat), "vfd_prob": float(p_final), "mts_prob": mts}


def risk_by_age_band(risks, ages, bands=DEFAULT_AGE_BANDS) -> dict[str, float]:
    """Mean predicted risk per age band; empty bands are flagged and omitted."""
    risks = np.asarray(risks, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    out = {}
    for lo, hi in bands:
        key = f"{lo:g}-{hi:g}"
        mask = (ages >= lo) & (ages < hi)
        if not mask.any():
            out[key] = None
            continue
        out[key] = float(risks[mask].mean())
    return out


@dataclass
class WarningResult:
    fired: bool
    first_warning_time: float | None
    first_warning_index: int | None
    lead_time_months: float | None
    delta_risk: float
    peak_risk: float


def dynamic_warning(
    visit_times,
    risks,
    onset_time: float | None = None,
    abs_threshold: float = WARN_ABS_THRESHOLD,
    rise_threshold: float = WARN_RISE_THRESHOLD,
) -> WarningResult:
    """First-visit warning: risk >= abs_threshold OR a two-visit rise >=
    rise_threshold. Lead time is (onset - first warning) in months; negative
    means the warning came after onset.
    """
    t = np.asarray(visit_times, dtype=np.float64)
    p = np.asarray(risks, dtype=np.float64)
    if t.size < 4:
        raise DataError("dynamic_warning needs at least 4 visits")
    if np.any(np.diff(t) <= 0):
        raise DataError("dynamic_warning: visit times must be strictly increasing")
    fired_at = None
    for i in range(t.size):
        if p[i] >= abs_threshold or (i >= 2 and p[i] - p[i - 2] >= rise_threshold):
            fired_at = i
            break
    lead = None
    if fired_at is not None and onset_time is not None:
        lead = (onset_time - float(t[fired_at])) * 12.0
    return WarningResult(
        fired=fired_at is not None,
        first_warning_time=None if fired_at is None else float(t[fired_at]),
        first_warning_index=fired_at,
        lead_time_months=lead,
        delta_risk=float(p[-1] - p[0]),
        peak_risk=float(p.max()),
    )


@dataclass
class MetricsReport:
    """Aggregate report shape shared by the CLI and the acceptance suite."""

    auc: float | None = None
    accuracy: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    f1: float | None = None
    md_mae: float | None = None
    coverage_points: list = field(default_factory=list)
    per_group: dict = field(default_factory=dict)
    warnings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "md_mae": self.md_mae,
            "coverage_points": [[c, a] for c, a in self.coverage_points],
            "per_group": self.per_group,
            "warnings": self.warnings,
        }


def screening_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    """AUC plus thresholded rates in one dict."""
    out = metrics_at_threshold(scores, labels, threshold)
    out["auc"] = roc_auc(scores, labels)
    return out


def mean_absolute_error(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigError("mean_absolute_error: shape mismatch")
    return float(np.abs(pred - target).mean())
