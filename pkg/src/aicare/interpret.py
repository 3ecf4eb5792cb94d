"""Attention analytics: value-importance curves, shapes, and care hints.

Every labeled visit yields one attention weight per dynamic feature. Binning
those weights against the (imputed, original-unit) feature values produces a
curve showing where along a feature's range the model pays attention. The
curve is then classified:

* ``v_shape``: attention falls to a minimum and rises on both sides; the
  minimum locates a turning point (the least concerning value);
* ``l_shape``: attention rises on exactly one side; the elbow where it
  settles onto the flat plateau locates the turning point;
* ``irregular``: anything else, no turning point is reported.

A recommendation direction comes from how risk moves with value over the
attended range, and a cause-of-death heatmap summarizes which features the
model watched for each outcome group.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyCurveError, InsufficientDataError
from .metrics import ScoredVisit  # noqa: F401  (re-exported for callers)
from .model import ModelConfig, ModelParams, forward_batch
from .preprocess import Preprocessor
from .records import CAUSE_CODES, LabeledCohort, VisitLabel

DEFAULT_NUM_BINS = 40
CENTRAL_COVERAGE = 0.99      # fraction of values spanned by the bin range
RISE_THRESHOLD = 0.05        # attention units; smaller rises read as flat
PLATEAU_FACTOR = 1.2         # elbow = first bin under factor * plateau + floor
PLATEAU_FLOOR = 0.02         # sparse plateaus sit at exact zero; treat anything
                             # under 40% of the rise threshold as already flat
MIN_TIE_TOL = 1e-3           # smoothed-attention gap treated as a tied minimum
MIN_POPULATED_BINS = 5

ALIVE_GROUP = "Alive"


@dataclass(frozen=True)
class ImportanceRecord:
    """One feature's attention at one labeled visit."""

    patient_id: str
    visit_index: int            # 1-based
    feature: str
    value: float                # imputed value in original units
    attention: float
    risk: float
    label: str                  # "Low" | "High"
    outcome: str                # "alive" | "died"
    cause: str | None


def collect_importance(data: LabeledCohort, preprocessor: Preprocessor,
                       params: ModelParams, config: ModelConfig,
                       activation: str = "sparsemax") -> list[ImportanceRecord]:
    """Score every Low/High visit and flatten attention per feature.

    ``data`` holds raw records; imputation and normalization run here so the
    reported values are the imputed ones in original units. The sparse
    activation is the default for analysis because exact zeros make the
    uninformative range visible.
    """
    out: list[ImportanceRecord] = []
    names = data.cohort.feature_names
    for record in data.cohort:
        labels = data.labels_for(record.patient_id)
        ts = [i + 1 for i, lab in enumerate(labels) if lab is not VisitLabel.UNCERTAIN]
        if not ts:
            continue
        filled = preprocessor.apply_record(record)
        risk, alpha, _ = forward_batch(filled, ts, params, config, activation=activation)
        imputed = filled.values * preprocessor.stats.std + preprocessor.stats.mean
        outcome = "died" if record.outcome.died else "alive"
        for row, t in enumerate(ts):
            lab = "High" if labels[t - 1] is VisitLabel.HIGH else "Low"
            for j, name in enumerate(names):
                out.append(ImportanceRecord(
                    patient_id=record.patient_id,
                    visit_index=t,
                    feature=name,
                    value=float(imputed[t - 1, j]),
                    attention=float(alpha.data[row, j]),
                    risk=float(risk.data[row]),
                    label=lab,
                    outcome=outcome,
                    cause=record.outcome.cause,
                ))
    return out


@dataclass(frozen=True)
class CurveBin:
    center: float
    count: int
    mean_attention: float
    mean_risk: float


@dataclass(frozen=True)
class ImportanceCurve:
    feature: str
    bin_width: float
    lo: float                   # inclusive lower edge of the binned range
    hi: float
    bins: tuple[CurveBin, ...]  # populated bins only, in value order


def importance_value_curve(records: list[ImportanceRecord], feature: str,
                           num_bins: int = DEFAULT_NUM_BINS) -> ImportanceCurve:
    """Equal-width attention-vs-value bins over the central 99% of values.

    Values outside the central range are clipped into the edge bins rather
    than dropped. With fewer records than bins the bin count shrinks to the
    record count so no curve is built from near-empty bins.
    """
    rows = [r for r in records if r.feature == feature]
    if not rows:
        raise EmptyCurveError(f"no importance records for feature {feature!r}")
    values = np.array([r.value for r in rows])
    attention = np.array([r.attention for r in rows])
    risk = np.array([r.risk for r in rows])

    num_bins = min(num_bins, len(rows))
    tail = (1.0 - CENTRAL_COVERAGE) / 2.0
    lo, hi = np.quantile(values, [tail, 1.0 - tail])
    if hi <= lo:
        lo, hi = float(values.min()), float(values.max())
    if hi <= lo:                      # constant feature
        hi = lo + 1.0
        num_bins = 1
    width = (hi - lo) / num_bins
    idx = np.clip(((values - lo) / width).astype(int), 0, num_bins - 1)

    bins = []
    for b in range(num_bins):
        mask = idx == b
        n = int(mask.sum())
        if n == 0:
            continue
        bins.append(CurveBin(
            center=float(lo + (b + 0.5) * width),
            count=n,
            mean_attention=float(attention[mask].mean()),
            mean_risk=float(risk[mask].mean()),
        ))
    return ImportanceCurve(feature, float(width), float(lo), float(hi), tuple(bins))


def _smooth(att: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """3-bin count-weighted moving average over adjacent populated bins."""
    out = np.empty_like(att)
    for i in range(len(att)):
        j0, j1 = max(0, i - 1), min(len(att), i + 2)
        w = counts[j0:j1].astype(float)
        out[i] = float((att[j0:j1] * w).sum() / w.sum())
    return out


def _weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    order = np.argsort(values)
    v, w = values[order], weights[order].astype(float)
    cum = np.cumsum(w)
    return float(v[np.searchsorted(cum, 0.5 * cum[-1])])


def _weighted_corr(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float | None:
    if len(x) < 2:
        return None
    w = w / w.sum()
    mx, my = (w * x).sum(), (w * y).sum()
    cov = (w * (x - mx) * (y - my)).sum()
    vx = (w * (x - mx) ** 2).sum()
    vy = (w * (y - my) ** 2).sum()
    if vx <= 0.0 or vy <= 0.0:
        return None
    return float(cov / np.sqrt(vx * vy))


@dataclass(frozen=True)
class ShapeResult:
    feature: str
    shape: str                       # "v_shape" | "l_shape" | "irregular"
    turning_point: float | None      # original units (bin center)
    rising_side: str | None          # l_shape only: "low" | "high"
    rise_low: float
    rise_high: float
    correlation: float | None        # value vs risk over the attended range
    recommendation: str              # "Higher" | "AtLeast" | "NotExceed" | "Unknown"


def classify_shape(curve: ImportanceCurve) -> ShapeResult:
    """Shape call plus turning point and care direction for one curve."""
    if len(curve.bins) < MIN_POPULATED_BINS:
        raise InsufficientDataError(
            f"feature {curve.feature!r} has only {len(curve.bins)} populated "
            f"bins; at least {MIN_POPULATED_BINS} are needed")
    centers = np.array([b.center for b in curve.bins])
    counts = np.array([b.count for b in curve.bins])
    att = np.array([b.mean_attention for b in curve.bins])
    risks = np.array([b.mean_risk for b in curve.bins])
    s = _smooth(att, counts)

    # Sparse activations leave whole uninformative ranges at (near-)exactly
    # zero, so the global minimum is a tied basin rather than one bin. Take
    # the count-weighted median of the tied bins; the first-index argmin
    # would report the basin's left edge instead of its middle.
    tied = np.flatnonzero(s <= s.min() + MIN_TIE_TOL)
    m = int(_weighted_median(tied.astype(float), counts[tied]))
    rise_low = float(s[:m + 1].max() - s[m])
    rise_high = float(s[m:].max() - s[m])
    low_rises = rise_low >= RISE_THRESHOLD
    high_rises = rise_high >= RISE_THRESHOLD

    if low_rises and high_rises:
        corr = _weighted_corr(centers, risks, counts)
        rec = "Unknown" if corr is None else ("Higher" if corr < 0 else "NotExceed")
        return ShapeResult(curve.feature, "v_shape", float(centers[m]), None,
                           rise_low, rise_high, corr, rec)

    if low_rises != high_rises:
        rising = "low" if low_rises else "high"
        # Plateau level: count-weighted median of the half of the curve
        # opposite the rising side. The median shrugs off end-of-range sag
        # and mid-plateau humps that a mean (or the argmin bin) would chase.
        half = len(s) // 2
        if rising == "low":
            flat_s, flat_w = s[half:], counts[half:]
            scan = range(len(s))                      # from low end upward
        else:
            flat_s, flat_w = s[:half + 1], counts[:half + 1]
            scan = range(len(s) - 1, -1, -1)          # from high end downward
        plateau = _weighted_median(flat_s, flat_w)
        cut = PLATEAU_FACTOR * plateau + PLATEAU_FLOOR
        elbow = m
        for i in scan:
            if s[i] < cut:
                elbow = i
                break
        side = np.arange(len(s)) <= elbow if rising == "low" else np.arange(len(s)) >= elbow
        corr = _weighted_corr(centers[side], risks[side], counts[side])
        # The attended side fixes the care direction: importance piled on low
        # values means the safe region is above the elbow, and vice versa.
        rec = "AtLeast" if rising == "low" else "NotExceed"
        return ShapeResult(curve.feature, "l_shape", float(centers[elbow]), rising,
                           rise_low, rise_high, corr, rec)

    return ShapeResult(curve.feature, "irregular", None, None,
                       rise_low, rise_high, None, "Unknown")


def analyze_features(records: list[ImportanceRecord], feature_names,
                     num_bins: int = DEFAULT_NUM_BINS) -> dict:
    """Curves plus shape calls for every feature, JSON-ready.

    Features with too few populated bins are reported with shape
    ``insufficient_data`` instead of failing the whole analysis.
    """
    out = {}
    for name in feature_names:
        curve = importance_value_curve(records, name, num_bins)
        entry = {
            "bin_width": curve.bin_width,
            "range": [curve.lo, curve.hi],
            "bins": [asdict(b) for b in curve.bins],
        }
        try:
            shape = classify_shape(curve)
            entry.update({
                "shape": shape.shape,
                "turning_point": shape.turning_point,
                "rising_side": shape.rising_side,
                "rise_low": shape.rise_low,
                "rise_high": shape.rise_high,
                "correlation": shape.correlation,
                "recommendation": shape.recommendation,
            })
        except InsufficientDataError as exc:
            entry.update({"shape": "insufficient_data", "turning_point": None,
                          "recommendation": "Unknown", "notice": str(exc)})
        out[name] = entry
    return out


def cod_heatmap(records: list[ImportanceRecord], feature_names) -> dict:
    """Mean attention per feature, grouped by cause of death (plus Alive).

    Died groups use High visits only (the window where deterioration shows);
    the Alive group uses every labeled visit. Causes with no qualifying
    visits are omitted and listed in ``notices``.
    """
    groups = list(CAUSE_CODES) + [ALIVE_GROUP]
    rows = {}
    notices = []
    for group in groups:
        if group == ALIVE_GROUP:
            sel = [r for r in records if r.outcome == "alive"]
        else:
            sel = [r for r in records if r.cause == group and r.label == "High"]
        if not sel:
            notices.append(f"no qualifying visits for group {group!r}; row omitted")
            continue
        by_feature = {}
        for name in feature_names:
            vals = [r.attention for r in sel if r.feature == name]
            by_feature[name] = float(np.mean(vals)) if vals else 0.0
        rows[group] = {"num_visits": len(sel) // max(1, len(feature_names)),
                       "attention": by_feature}
    return {"features": list(feature_names), "groups": rows, "notices": notices}


def write_importance_csv(path, records: list[ImportanceRecord]) -> None:
    fields = ["patient_id", "visit_index", "feature", "value", "attention",
              "risk", "label", "outcome", "cause"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in records:
            writer.writerow([r.patient_id, r.visit_index, r.feature,
                             repr(r.value), repr(r.attention), repr(r.risk),
                             r.label, r.outcome, r.cause or ""])


def write_json(path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, shortest round-trip floats."""
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def report_table(analysis: dict) -> str:
    """Human-readable summary, one feature per line."""
    lines = [f"{'feature':<16} {'shape':<18} {'turning point':>13}   recommendation"]
    for name in sorted(analysis):
        entry = analysis[name]
        tp = entry.get("turning_point")
        tp_s = f"{tp:.2f}" if tp is not None else "-"
        lines.append(f"{name:<16} {entry['shape']:<18} {tp_s:>13}   "
                     f"{entry.get('recommendation', 'Unknown')}")
    return "\n".join(lines)
