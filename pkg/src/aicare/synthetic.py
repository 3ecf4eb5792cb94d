"""Synthetic longitudinal cohort generator with planted response shapes.

Each patient carries a bounded latent health walk; the per-visit death
hazard (a logistic in several additive terms) rises as latent health falls.
Two designated features drive the hazard directly with known shapes so a
trained model can be audited against ground truth:

* the V-feature raises hazard on both sides of a configured turning point
  (much more steeply below it), so values near the turning point are
  uninformative and extremes are strongly informative;
* the L-feature raises hazard only below its turning point and is inert
  above it;
* a designated noise feature has no link to the hazard at all.

Background features are drawn around risk-conditional means interpolated by
latent health, which gives them realistic weak associations with outcome.
Missingness is injected per feature at configured rates after the true
values have fed the hazard. Everything is driven by one seeded generator,
so a (spec, seed) pair reproduces the cohort byte for byte.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .records import CAUSE_CODES, Cohort, Outcome, PatientRecord, label_cohort, VisitLabel

ROLES = ("background", "v_shape", "l_shape", "noise")

# Death-cause mix for the PD-like cohort (relative patient counts).
CAUSE_WEIGHTS = {
    "CVE": 74, "CVD": 21, "GI": 17, "PDAP": 21, "Cancer": 23,
    "Other": 50, "Infection": 33, "PVD": 13, "Cachexia": 9,
}


@dataclass(frozen=True)
class FeatureSpec:
    """One dynamic feature's generative settings.

    Background features interpolate between ``sick_mean`` (latent health 0)
    and ``healthy_mean`` (latent health 1) plus noise. Planted and noise
    features follow a per-patient AR(1) process centered on a patient mean
    drawn from N(healthy_mean, between_std); planted roles additionally
    feed the hazard through a capped quadratic around ``turning_point``.
    """

    name: str
    unit: str = ""
    role: str = "background"
    healthy_mean: float = 0.0
    sick_mean: float = 0.0
    noise_std: float = 1.0
    between_std: float = 0.0
    persistence: float = 0.6
    trend_mean: float = 0.0       # units per year drift of the patient anchor
    trend_std: float = 0.0
    floor: float | None = None    # biological lower bound for the anchor
    ceiling: float | None = None  # upper clamp on the anchor path
    missing_rate: float = 0.0
    reference_range: tuple[float, float] | None = None
    turning_point: float | None = None
    hazard_scale: float = 1.0
    weight_below: float = 0.0
    weight_above: float = 0.0
    cause_link: str | None = None  # deaths this feature drives carry this cause

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"feature {self.name}: unknown role {self.role!r}")
        if not 0.0 <= self.missing_rate <= 1.0:
            raise ConfigError(f"feature {self.name}: missing_rate must be in [0, 1]")
        if self.role in ("v_shape", "l_shape") and self.turning_point is None:
            raise ConfigError(f"feature {self.name}: planted roles need a turning_point")
        if self.cause_link is not None:
            if self.cause_link not in CAUSE_CODES:
                raise ConfigError(f"feature {self.name}: unknown cause {self.cause_link!r}")
            if self.role not in ("v_shape", "l_shape"):
                raise ConfigError(f"feature {self.name}: cause_link needs a planted role")


@dataclass(frozen=True)
class CohortSpec:
    """Everything the generator needs to produce one cohort."""

    name: str
    num_patients: int
    features: tuple[FeatureSpec, ...]
    kind: str = "longitudinal"            # "longitudinal" | "separable"
    study_start: str = "2008-01-01"
    enrollment_years: float = 4.5
    followup_years: float = 8.0
    visit_interval_days_mean: float = 83.0
    visit_interval_days_std: float = 35.0
    visit_interval_days_min: float = 14.0
    base_logit: float = -9.2
    frailty_weight: float = 0.45
    age_weight: float = 0.25
    hazard_cap: float = 4.0

    def __post_init__(self):
        if self.num_patients < 1:
            raise ConfigError(f"num_patients must be >= 1, got {self.num_patients}")
        if not self.features:
            raise ConfigError("a cohort spec needs at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError("feature names must be unique")
        if self.kind not in ("longitudinal", "separable"):
            raise ConfigError(f"unknown cohort kind {self.kind!r}")

    def feature_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = [asdict(f) for f in self.features]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        feats = []
        for f in d.pop("features"):
            f = dict(f)
            if f.get("reference_range") is not None:
                f["reference_range"] = tuple(f["reference_range"])
            feats.append(FeatureSpec(**f))
        return cls(features=tuple(feats), **d)


def _background_panel() -> list[FeatureSpec]:
    """The 13 routine-lab features shared by the longitudinal presets."""
    rows = [
        ("diastolic_bp", "mmHg", 76.0, 72.7, 11.5, 0.18, (60.0, 80.0)),
        ("chloride", "mmol/L", 98.9, 98.5, 5.5, 0.17, (96.0, 106.0)),
        ("creatinine", "umol/L", 952.0, 888.0, 310.0, 0.10, (62.0, 115.0)),
        ("urea", "mmol/L", 21.3, 20.7, 7.0, 0.11, (3.1, 9.0)),
        ("calcium", "mmol/L", 2.38, 2.33, 0.27, 0.12, (2.25, 2.75)),
        ("sodium", "mmol/L", 138.5, 138.2, 3.4, 0.21, (135.0, 145.0)),
        ("potassium", "mmol/L", 4.36, 4.38, 0.83, 0.11, (3.5, 5.5)),
        ("phosphorus", "mmol/L", 1.78, 1.66, 0.49, 0.13, (1.1, 1.3)),
        ("co2_binding", "mmol/L", 27.2, 27.4, 4.0, 0.08, (20.0, 29.0)),
        ("hemoglobin", "g/L", 112.7, 104.7, 16.5, 0.12, (115.0, 150.0)),
        ("weight", "kg", 59.4, 57.9, 10.8, 0.41, None),
        ("glucose", "mmol/L", 6.54, 7.33, 3.0, 0.30, (3.9, 6.1)),
        ("hs_crp", "mg/L", 11.4, 17.2, 18.0, 0.29, (0.5, 10.0)),
    ]
    return [FeatureSpec(name=n, unit=u, role="background", healthy_mean=h,
                        sick_mean=s, noise_std=std, missing_rate=m,
                        reference_range=ref)
            for n, u, h, s, std, m, ref in rows]


def pd_default_spec(num_patients: int = 656) -> CohortSpec:
    """A peritoneal-dialysis-flavoured cohort with 16 dynamic features.

    Albumin is the planted V-feature (turning point 32 g/L, deaths it
    drives recorded as Cachexia), systolic pressure the planted L-feature
    (turning point 130 mmHg, linked to CVE), and white cell count the
    designated noise feature. Calibrated so roughly 9% of labeled visits
    fall in the high-risk window and patients average about 20 visits.
    """
    f = [
        FeatureSpec(
            name="albumin", unit="g/L", role="v_shape",
            healthy_mean=36.8, noise_std=1.6, between_std=2.6, persistence=0.7,
            trend_mean=-0.8, trend_std=1.3, floor=19.0,
            missing_rate=0.25, reference_range=(40.0, 55.0),
            turning_point=32.0, hazard_scale=4.0, weight_below=1.7,
            weight_above=0.95, cause_link="Cachexia"),
        FeatureSpec(
            name="systolic_bp", unit="mmHg", role="l_shape",
            healthy_mean=128.0, noise_std=6.0, between_std=11.0, persistence=0.7,
            trend_mean=-2.2, trend_std=4.5, floor=72.0,
            missing_rate=0.14, reference_range=(100.0, 120.0),
            turning_point=130.0, hazard_scale=15.0, weight_below=1.6,
            cause_link="CVE"),
        FeatureSpec(
            name="wbc", unit="x10^9/L", role="noise",
            healthy_mean=7.9, noise_std=1.4, between_std=1.1, persistence=0.45,
            trend_std=0.12, missing_rate=0.10, reference_range=(3.5, 9.5)),
    ]
    f.extend(_background_panel())
    return CohortSpec(name="pd_synthetic", num_patients=num_patients,
                      features=tuple(f), base_logit=-9.55)


def shape_probe_spec(num_patients: int = 600) -> CohortSpec:
    """A cohort tuned for auditing planted-shape recovery end to end.

    Same feature panel as the default preset, but the planted channels are
    reshaped so the hazard they carry is recoverable from attention. The
    load-bearing property is that neither planted feature is informative
    for the whole cohort: each one matters only for the subpopulation whose
    anchor trend actually reaches its hazard zone. A cohort-wide drift
    toward a cliff would let the model treat that one channel as a global
    mortality clock and starve every other channel of attention.

    Three more knobs matter for recovering the planted turning points to
    within the one-year label horizon:

    * hazard walls are steep: the ramp from harmless to near-certain death
      spans well under two units of feature value, so current value alone
      determines risk. With a shallow ramp, risk depends on how long a
      trajectory will take to reach the lethal range, which an attention
      readout over instantaneous values cannot represent, and most of a
      slow decline gets labeled low-risk anyway once the one-year horizon
      cuts it up;
    * the two albumin arms kill at nearly matched rates. The valley floor
      is estimated from visits of surviving patients, so if one arm
      harvests far more of the anchor distribution than the other, the
      survivor population and with it the apparent valley center shifts
      away from the planted turning point. The low arm stays slightly
      deadlier so the attention-weighted value correlation keeps its sign;
    * systolic anchors sit several spreads above the wall and only
      trend-crossers ever reach it, so the sub-wall range is populated
      almost exclusively by patients inside their final labeled year and
      stays free of long-term survivors who would dilute the contrast.
      The anchor path is also clamped from above: without a ceiling,
      patients parked at extreme-high pressure are persistently that
      channel's most extreme signal, and the model adopts high pressure
      as an alive-indicator, which buries the planted low-side rise.
      Albumin needs no ceiling because its own high arm removes
      extreme-anchor patients. White cell count keeps little
      between-patient identity, leaving the model nothing durable there.
    """
    f = [
        FeatureSpec(
            name="albumin", unit="g/L", role="v_shape",
            healthy_mean=31.95, noise_std=0.35, between_std=1.1, persistence=0.55,
            trend_mean=-0.1, trend_std=0.25, floor=18.0,
            missing_rate=0.08, reference_range=(40.0, 55.0),
            turning_point=32.0, hazard_scale=1.0, weight_below=3.0,
            weight_above=2.7, cause_link="Cachexia"),
        FeatureSpec(
            name="systolic_bp", unit="mmHg", role="l_shape",
            healthy_mean=138.0, noise_std=0.4, between_std=4.0, persistence=0.5,
            trend_mean=-0.85, trend_std=0.55, floor=82.0, ceiling=143.0,
            missing_rate=0.10, reference_range=(100.0, 120.0),
            turning_point=130.0, hazard_scale=0.8, weight_below=3.3,
            cause_link="CVE"),
        FeatureSpec(
            name="wbc", unit="x10^9/L", role="noise",
            healthy_mean=7.9, noise_std=0.75, between_std=0.35, persistence=0.30,
            trend_std=0.05, missing_rate=0.18, reference_range=(3.5, 9.5)),
    ]
    f.extend(_background_panel())
    return CohortSpec(name="shape_probe", num_patients=num_patients,
                      features=tuple(f), base_logit=-10.7,
                      frailty_weight=0.25, age_weight=0.15)


def separable_spec(num_patients: int = 80) -> CohortSpec:
    """A small toy cohort where one marker feature fully determines labels."""
    feats = (
        FeatureSpec(name="marker", role="noise", healthy_mean=0.0,
                    noise_std=0.25, between_std=0.0, persistence=0.0),
        FeatureSpec(name="noise_a", role="noise", healthy_mean=0.0,
                    noise_std=1.0, between_std=0.5, persistence=0.3),
        FeatureSpec(name="noise_b", role="noise", healthy_mean=5.0,
                    noise_std=2.0, between_std=1.0, persistence=0.3),
    )
    return CohortSpec(name="separable_toy", num_patients=num_patients,
                      features=feats, kind="separable",
                      enrollment_years=2.0, followup_years=6.0,
                      visit_interval_days_mean=90.0, visit_interval_days_std=20.0)


def _shape_term(f: FeatureSpec, value: float, cap: float) -> float:
    if f.role == "v_shape":
        d = (f.turning_point - value) / f.hazard_scale
        if d > 0:
            return f.weight_below * min(d * d, cap)
        return f.weight_above * min(d * d, cap)
    if f.role == "l_shape":
        d = (f.turning_point - value) / f.hazard_scale
        if d > 0:
            return f.weight_below * min(d * d, cap)
        return 0.0
    return 0.0


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def _generate_longitudinal(spec: CohortSpec, seed: int) -> Cohort:
    rng = np.random.default_rng(seed)
    start = dt.date.fromisoformat(spec.study_start)
    data_end = start + dt.timedelta(days=round(spec.followup_years * 365))
    cause_names = list(CAUSE_WEIGHTS)
    cause_probs = np.array([CAUSE_WEIGHTS[c] for c in cause_names], dtype=float)
    cause_probs /= cause_probs.sum()

    patients = []
    for i in range(spec.num_patients):
        pid = f"P{i:04d}"
        age = float(np.clip(rng.normal(58.0, 14.0), 18.0, 93.0))
        gender = float(rng.random() < 0.55)
        height = float(np.clip(rng.normal(162.0, 8.5), 140.0, 195.0))
        diabetes = float(rng.random() < 0.37)
        baseline = np.array([age, gender, height, diabetes])

        eta = float(np.clip(rng.normal(0.62, 0.16), 0.05, 0.95))
        drift = rng.normal(-0.002, 0.004)
        enroll = start + dt.timedelta(days=int(rng.uniform(0, spec.enrollment_years * 365)))

        # Per-patient anchors for AR(1) features (planted and noise roles);
        # anchors drift linearly in time so some patients slide into the
        # hazardous range and die soon after crossing it.
        anchors = {}
        trends = {}
        deviation = {}
        for f in spec.features:
            if f.role in ("v_shape", "l_shape", "noise"):
                anchors[f.name] = rng.normal(f.healthy_mean, f.between_std)
                trends[f.name] = rng.normal(f.trend_mean, f.trend_std)
                deviation[f.name] = rng.normal(0.0, f.noise_std)

        date = enroll
        dates, rows = [], []
        death_date = None
        linked_terms = []
        background_mass = 1.0
        while date < data_end:
            years = (date - enroll).days / 365.0
            eta = float(np.clip(eta + drift + rng.normal(0.0, 0.03), 0.02, 0.98))
            true_row = np.empty(len(spec.features))
            for j, f in enumerate(spec.features):
                if f.role == "background":
                    center = f.sick_mean + (f.healthy_mean - f.sick_mean) * eta
                    true_row[j] = center + rng.normal(0.0, f.noise_std)
                else:
                    mu = anchors[f.name] + trends[f.name] * years
                    if f.floor is not None:
                        mu = max(mu, f.floor)
                    if f.ceiling is not None:
                        mu = min(mu, f.ceiling)
                    d = f.persistence * deviation[f.name] + rng.normal(0.0, f.noise_std)
                    deviation[f.name] = d
                    true_row[j] = mu + d

            context = spec.frailty_weight * (0.5 - eta) * 2.0 \
                + spec.age_weight * (age - 58.0) / 16.0
            logit = spec.base_logit + context
            for j, f in enumerate(spec.features):
                logit += _shape_term(f, true_row[j], spec.hazard_cap)
            p_death = _sigmoid(logit)

            stored = true_row.copy()
            for j, f in enumerate(spec.features):
                if f.missing_rate > 0.0 and rng.random() < f.missing_rate:
                    stored[j] = np.nan
            dates.append(date)
            rows.append(stored)

            interval = max(spec.visit_interval_days_min,
                           rng.normal(spec.visit_interval_days_mean,
                                      spec.visit_interval_days_std))
            if rng.random() < p_death:
                death_date = date + dt.timedelta(days=int(rng.uniform(10, max(11, interval))))
                # Attribute the death among cause-linked planted features in
                # proportion to their hazard contribution at this last visit;
                # everything else counts toward the generic background pool.
                background_mass = 1.0 + max(0.0, context)
                for j, f in enumerate(spec.features):
                    term = _shape_term(f, true_row[j], spec.hazard_cap)
                    if f.cause_link is not None:
                        linked_terms.append((f.cause_link, term))
                    else:
                        background_mass += term
                break
            date = date + dt.timedelta(days=int(interval))

        if not dates:
            continue
        if death_date is not None:
            weights = np.array([w for _, w in linked_terms] + [background_mass])
            pick = int(rng.choice(len(weights), p=weights / weights.sum()))
            if pick < len(linked_terms):
                cause = linked_terms[pick][0]
            else:
                cause = cause_names[rng.choice(len(cause_names), p=cause_probs)]
            outcome = Outcome("died", death_date, cause)
        else:
            outcome = Outcome("alive")
        patients.append(PatientRecord(pid, tuple(dates), np.vstack(rows),
                                      baseline, outcome))
    return Cohort(spec.feature_names(), tuple(patients))


def _generate_separable(spec: CohortSpec, seed: int) -> Cohort:
    """Marker = +2 at visits within a year of death, -2 otherwise."""
    rng = np.random.default_rng(seed)
    start = dt.date.fromisoformat(spec.study_start)
    data_end = start + dt.timedelta(days=round(spec.followup_years * 365))
    marker_index = 0

    patients = []
    for i in range(spec.num_patients):
        pid = f"S{i:04d}"
        baseline = np.array([float(np.clip(rng.normal(58.0, 12.0), 20.0, 90.0)),
                             float(rng.random() < 0.5),
                             float(np.clip(rng.normal(162.0, 8.0), 140.0, 195.0)),
                             float(rng.random() < 0.3)])
        enroll = start + dt.timedelta(days=int(rng.uniform(0, spec.enrollment_years * 365)))
        dates = []
        date = enroll
        while date < data_end:
            dates.append(date)
            step = max(spec.visit_interval_days_min,
                       rng.normal(spec.visit_interval_days_mean,
                                  spec.visit_interval_days_std))
            date = date + dt.timedelta(days=int(step))
        if not dates:
            continue

        dies = rng.random() < 0.4 and len(dates) >= 3
        if dies:
            cut = int(rng.integers(2, len(dates)))
            dates = dates[:cut + 1]
            death_date = dates[-1] + dt.timedelta(days=int(rng.uniform(40, 320)))
            outcome = Outcome("died", death_date,
                              CAUSE_CODES[int(rng.integers(0, len(CAUSE_CODES)))])
        else:
            outcome = Outcome("alive")

        rows = []
        anchors = [rng.normal(f.healthy_mean, f.between_std) for f in spec.features]
        prev = list(anchors)
        for d in dates:
            row = np.empty(len(spec.features))
            for j, f in enumerate(spec.features):
                value = anchors[j] + f.persistence * (prev[j] - anchors[j]) \
                    + rng.normal(0.0, f.noise_std)
                prev[j] = value
                row[j] = value
            if dies and (death_date - d).days <= 365:
                row[marker_index] = 2.0 + rng.normal(0.0, 0.25)
            else:
                row[marker_index] = -2.0 + rng.normal(0.0, 0.25)
            rows.append(row)
        patients.append(PatientRecord(pid, tuple(dates), np.vstack(rows),
                                      baseline, outcome))
    return Cohort(spec.feature_names(), tuple(patients))


def generate_synthetic(spec: CohortSpec, seed: int) -> tuple[Cohort, dict]:
    """Generate one cohort and its ground-truth payload."""
    if spec.kind == "separable":
        cohort = _generate_separable(spec, seed)
    else:
        cohort = _generate_longitudinal(spec, seed)
    truth = build_truth(spec, seed, cohort)
    return cohort, truth


def build_truth(spec: CohortSpec, seed: int, cohort: Cohort) -> dict:
    """Ground-truth payload: planted roles plus realized cohort statistics."""
    labeled = label_cohort(cohort)
    n_visits = sum(p.num_visits for p in cohort.patients)
    n_positive = sum(1 for labs in labeled.labels.values()
                     for lab in labs if lab is VisitLabel.HIGH)
    n_uncertain = sum(1 for labs in labeled.labels.values()
                      for lab in labs if lab is VisitLabel.UNCERTAIN)
    n_died = sum(1 for p in cohort.patients if p.outcome.died)
    planted = {}
    for f in spec.features:
        if f.role != "background":
            planted[f.name] = {
                "role": f.role,
                "turning_point": f.turning_point,
                "weight_below": f.weight_below,
                "weight_above": f.weight_above,
                "cause_link": f.cause_link,
            }
    roles = {r: [f.name for f in spec.features if f.role == r] for r in ROLES}
    return {
        "spec_name": spec.name,
        "kind": spec.kind,
        "seed": seed,
        "planted": planted,
        "v_feature": (roles["v_shape"] or [None])[0],
        "l_feature": (roles["l_shape"] or [None])[0],
        "noise_feature": (roles["noise"] or [None])[0],
        "cause_links": {f.name: f.cause_link for f in spec.features
                        if f.cause_link is not None},
        "stats": {
            "num_patients": len(cohort.patients),
            "num_visits": n_visits,
            "num_positive_visits": n_positive,
            "num_uncertain_visits": n_uncertain,
            "positive_rate": n_positive / n_visits if n_visits else 0.0,
            "labeled_positive_rate": (n_positive / (n_visits - n_uncertain)
                                      if n_visits > n_uncertain else 0.0),
            "visits_per_patient": n_visits / len(cohort.patients) if cohort.patients else 0.0,
            "mortality_rate": n_died / len(cohort.patients) if cohort.patients else 0.0,
        },
    }


def write_spec(path, spec: CohortSpec) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)


def load_spec(path) -> CohortSpec:
    with open(path) as fh:
        return CohortSpec.from_dict(json.load(fh))
