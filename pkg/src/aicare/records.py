"""Patient records, cohort files, and visit labeling.

A cohort is built from three CSV files sharing string patient ids:

* ``visits.csv``: ``patient_id,date,<feature_1>,...,<feature_N>`` with ISO
  dates and empty cells marking missing values. Rows for one patient must
  appear in strictly increasing date order.
* ``baseline.csv``: ``patient_id,age,gender,height,diabetes``.
* ``outcomes.csv``: ``patient_id,status,death_date,cause_of_death`` where
  status is ``alive`` or ``died``.

Labels look one year ahead of each visit with a fixed 365-day year:
for a patient who died on day d, a visit at t is High when d - t <= 365,
Uncertain when 365 < d - t <= 730, and Low otherwise. For an alive patient
a visit is Uncertain when less than a year of follow-up remained before the
cohort's data end date, and Low otherwise.
"""

from __future__ import annotations

import csv
import datetime as dt
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError, ParseError

DAYS_PER_YEAR = 365

CAUSE_CODES = (
    "CVE", "CVD", "GI", "PDAP", "Cancer", "Other", "Infection", "PVD", "Cachexia",
)

BASELINE_FIELDS = ("age", "gender", "height", "diabetes")
BINARY_BASELINE = (False, True, False, True)


class VisitLabel(enum.Enum):
    LOW = "low"
    UNCERTAIN = "uncertain"
    HIGH = "high"


@dataclass(frozen=True)
class Outcome:
    status: str                              # "alive" | "died"
    death_date: dt.date | None = None
    cause: str | None = None

    @property
    def died(self) -> bool:
        return self.status == "died"


@dataclass(frozen=True)
class PatientRecord:
    """One patient: dated visit rows plus a static baseline vector.

    ``values`` is a (T, N) float matrix where NaN marks a missing value.
    """

    patient_id: str
    dates: tuple[dt.date, ...]
    values: np.ndarray
    baseline: np.ndarray
    outcome: Outcome

    def __post_init__(self):
        self.values.flags.writeable = False
        self.baseline.flags.writeable = False

    @property
    def num_visits(self) -> int:
        return len(self.dates)


@dataclass(frozen=True)
class Cohort:
    feature_names: tuple[str, ...]
    patients: tuple[PatientRecord, ...]
    baseline_names: tuple[str, ...] = BASELINE_FIELDS

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def by_id(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def max_visit_date(self) -> dt.date:
        dates = [p.dates[-1] for p in self.patients if p.dates]
        if not dates:
            raise IntegrityError("cohort has no visits")
        return max(dates)


@dataclass(frozen=True)
class LabeledCohort:
    """A cohort paired with per-visit labels, keyed by patient id."""

    cohort: Cohort
    labels: dict[str, tuple[VisitLabel, ...]]
    data_end_date: dt.date

    def labels_for(self, patient_id: str) -> tuple[VisitLabel, ...]:
        return self.labels[patient_id]


def _parse_date(text: str, path, line) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise ParseError(f"bad date {text!r}: {exc}", path, line) from None


def _parse_float(text: str, column: str, path, line) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"bad numeric value {text!r} in column {column!r}", path, line) from None


def load_cohort(visits_path, baseline_path, outcomes_path,
                expected_features: tuple[str, ...] | None = None) -> Cohort:
    """Parse the three cohort files into an immutable Cohort.

    Patients are those present in ``baseline.csv`` with at least one visit;
    a baseline row with no visits is permitted and dropped. Visits naming a
    patient absent from the baseline file, duplicate or non-increasing visit
    dates, missing outcomes, and death dates before the last visit are all
    integrity errors.
    """
    with open(visits_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", visits_path, 1) from None
        if len(header) < 2 or header[0] != "patient_id" or header[1] != "date":
            raise ParseError(
                f"header must start with patient_id,date; got {header[:2]}", visits_path, 1)
        feature_names = tuple(header[2:])
        if len(set(feature_names)) != len(feature_names):
            raise ParseError("duplicate feature columns in header", visits_path, 1)
        if expected_features is not None and feature_names != tuple(expected_features):
            unknown = sorted(set(feature_names) - set(expected_features))
            missing = sorted(set(expected_features) - set(feature_names))
            raise ParseError(
                f"feature columns do not match expectation (unknown: {unknown}, missing: {missing})",
                visits_path, 1)

        visit_rows: dict[str, list[tuple[dt.date, np.ndarray]]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} columns, got {len(row)}", visits_path, lineno)
            pid = row[0]
            if not pid:
                raise ParseError("empty patient_id", visits_path, lineno)
            date = _parse_date(row[1], visits_path, lineno)
            vals = np.full(len(feature_names), np.nan)
            for j, cell in enumerate(row[2:]):
                if cell != "":
                    vals[j] = _parse_float(cell, feature_names[j], visits_path, lineno)
            rows = visit_rows.setdefault(pid, [])
            if rows and date <= rows[-1][0]:
                raise IntegrityError(
                    f"patient {pid}: visit dates must be strictly increasing "
                    f"({rows[-1][0]} then {date} at {visits_path} line {lineno})")
            rows.append((date, vals))

    baselines: dict[str, np.ndarray] = {}
    with open(baseline_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", baseline_path, 1) from None
        if tuple(header) != ("patient_id",) + BASELINE_FIELDS:
            raise ParseError(
                f"header must be patient_id,{','.join(BASELINE_FIELDS)}; got {header}",
                baseline_path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 columns, got {len(row)}", baseline_path, lineno)
            pid = row[0]
            if pid in baselines:
                raise IntegrityError(f"duplicate baseline row for patient {pid} "
                                     f"at {baseline_path} line {lineno}")
            baselines[pid] = np.array(
                [_parse_float(c, name, baseline_path, lineno)
                 for c, name in zip(row[1:], BASELINE_FIELDS)])

    outcomes: dict[str, Outcome] = {}
    with open(outcomes_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", outcomes_path, 1) from None
        if tuple(header) != ("patient_id", "status", "death_date", "cause_of_death"):
            raise ParseError(
                f"header must be patient_id,status,death_date,cause_of_death; got {header}",
                outcomes_path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 columns, got {len(row)}", outcomes_path, lineno)
            pid, status, death_text, cause = row
            if status not in ("alive", "died"):
                raise ParseError(f"status must be alive or died, got {status!r}",
                                 outcomes_path, lineno)
            if pid in outcomes:
                raise IntegrityError(f"duplicate outcome row for patient {pid} "
                                     f"at {outcomes_path} line {lineno}")
            if status == "died":
                if not death_text:
                    raise ParseError("died patients need a death_date", outcomes_path, lineno)
                death_date = _parse_date(death_text, outcomes_path, lineno)
                if cause and cause not in CAUSE_CODES:
                    raise ParseError(
                        f"unknown cause code {cause!r}; expected one of {list(CAUSE_CODES)}",
                        outcomes_path, lineno)
                outcomes[pid] = Outcome("died", death_date, cause or None)
            else:
                if death_text or cause:
                    raise ParseError("alive patients must leave death fields empty",
                                     outcomes_path, lineno)
                outcomes[pid] = Outcome("alive")

    for pid in visit_rows:
        if pid not in baselines:
            raise IntegrityError(f"visits reference patient {pid} absent from baseline file")

    patients = []
    for pid in sorted(visit_rows):
        if pid not in outcomes:
            raise IntegrityError(f"patient {pid} has no outcome row")
        rows = visit_rows[pid]
        outcome = outcomes[pid]
        if outcome.died and outcome.death_date < rows[-1][0]:
            raise IntegrityError(
                f"patient {pid}: death date {outcome.death_date} precedes "
                f"last visit {rows[-1][0]}")
        dates = tuple(r[0] for r in rows)
        values = np.vstack([r[1] for r in rows]) if rows else np.empty((0, len(feature_names)))
        patients.append(PatientRecord(pid, dates, values, baselines[pid], outcome))
    return Cohort(feature_names, tuple(patients))


def _format_value(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_cohort(cohort: Cohort, visits_path, baseline_path, outcomes_path) -> None:
    """Write the three cohort CSVs with round-trippable float formatting."""
    with open(visits_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "date", *cohort.feature_names])
        for p in cohort.patients:
            for date, row in zip(p.dates, p.values):
                writer.writerow([p.patient_id, date.isoformat(),
                                 *(_format_value(v) for v in row)])
    with open(baseline_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", *BASELINE_FIELDS])
        for p in cohort.patients:
            writer.writerow([p.patient_id, *(repr(float(v)) for v in p.baseline)])
    with open(outcomes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "status", "death_date", "cause_of_death"])
        for p in cohort.patients:
            o = p.outcome
            writer.writerow([p.patient_id, o.status,
                             o.death_date.isoformat() if o.death_date else "",
                             o.cause or ""])


def assign_labels(record: PatientRecord, data_end_date: dt.date) -> tuple[VisitLabel, ...]:
    """Label each visit of one patient by one-year-ahead outcome."""
    labels = []
    for date in record.dates:
        if record.outcome.died:
            gap = (record.outcome.death_date - date).days
            if gap < 0:
                raise IntegrityError(
                    f"patient {record.patient_id}: visit {date} after death "
                    f"{record.outcome.death_date}")
            if gap <= DAYS_PER_YEAR:
                labels.append(VisitLabel.HIGH)
            elif gap <= 2 * DAYS_PER_YEAR:
                labels.append(VisitLabel.UNCERTAIN)
            else:
                labels.append(VisitLabel.LOW)
        else:
            remaining = (data_end_date - date).days
            if remaining <= DAYS_PER_YEAR:
                labels.append(VisitLabel.UNCERTAIN)
            else:
                labels.append(VisitLabel.LOW)
    return tuple(labels)


def label_cohort(cohort: Cohort, data_end_date: dt.date | None = None) -> LabeledCohort:
    """Label every patient; data end defaults to the cohort's last visit date."""
    if data_end_date is None:
        data_end_date = cohort.max_visit_date()
    labels = {p.patient_id: assign_labels(p, data_end_date) for p in cohort.patients}
    return LabeledCohort(cohort, labels, data_end_date)


def anonymize_dates(cohort: Cohort) -> Cohort:
    """Shift all dates by one cohort-wide offset so visits start in year 1000."""
    first = min(p.dates[0] for p in cohort.patients if p.dates)
    offset = dt.date(1000, 1, 1) - first
    patients = []
    for p in cohort.patients:
        outcome = p.outcome
        if outcome.death_date is not None:
            outcome = Outcome(outcome.status, outcome.death_date + offset, outcome.cause)
        patients.append(PatientRecord(
            p.patient_id, tuple(d + offset for d in p.dates),
            p.values.copy(), p.baseline.copy(), outcome))
    return Cohort(cohort.feature_names, tuple(patients), cohort.baseline_names)
