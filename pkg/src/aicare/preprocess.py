"""Imputation, normalization, and fold assignment.

All statistics (imputation fallbacks and z-score moments) are fitted on a
training split only and then applied unchanged to any other split, so no
information leaks from held-out patients. Transforms return new cohorts and
never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .records import BINARY_BASELINE, Cohort, PatientRecord

# Feature variance below this is treated as zero and left unscaled.
_VAR_FLOOR = 1e-12


def feature_medians(cohort: Cohort) -> np.ndarray:
    """Per-feature median over all observed (non-missing) visit values.

    Features never observed in the cohort fall back to 0.0 so that imputation
    stays defined; the normalizer will also leave such features unscaled.
    """
    if not cohort.patients:
        raise DomainError("cannot take medians of an empty cohort")
    stacked = np.vstack([p.values for p in cohort.patients])
    medians = np.zeros(stacked.shape[1])
    for j in range(stacked.shape[1]):
        col = stacked[:, j]
        observed = col[~np.isnan(col)]
        if observed.size:
            medians[j] = float(np.median(observed))
    return medians


def forward_fill(record: PatientRecord, fallback: np.ndarray) -> PatientRecord:
    """Impute missing values from each feature's most recent observation.

    Leading gaps (no history yet) take the per-feature ``fallback`` value,
    which should be the training-split median. Idempotent: re-filling a
    filled record changes nothing.
    """
    if fallback.shape != (record.values.shape[1],):
        raise ConfigError(
            f"fallback length {fallback.shape} does not match feature count "
            f"{record.values.shape[1]}")
    filled = record.values.copy()
    last = fallback.copy()
    for t in range(filled.shape[0]):
        row = filled[t]
        missing = np.isnan(row)
        row[missing] = last[missing]
        last = row
    return PatientRecord(record.patient_id, record.dates, filled,
                         record.baseline.copy(), record.outcome)


def fill_cohort(cohort: Cohort, fallback: np.ndarray) -> Cohort:
    return Cohort(cohort.feature_names,
                  tuple(forward_fill(p, fallback) for p in cohort.patients),
                  cohort.baseline_names)


@dataclass(frozen=True)
class NormStats:
    """Z-score moments fitted on an imputed training split."""

    mean: np.ndarray            # (N,) visit features
    std: np.ndarray             # (N,) 1.0 where variance was zero
    scaled: np.ndarray          # (N,) bool, False = passed through unscaled
    baseline_mean: np.ndarray   # (N0,)
    baseline_std: np.ndarray
    baseline_scaled: np.ndarray


def fit_normalization(cohort: Cohort) -> NormStats:
    """Fit per-feature moments on an already-imputed cohort.

    Binary baseline fields are never scaled; zero-variance features are
    passed through unchanged.
    """
    stacked = np.vstack([p.values for p in cohort.patients])
    if np.isnan(stacked).any():
        raise DomainError("normalization must be fitted on an imputed cohort")
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    scaled = std > _VAR_FLOOR
    mean = np.where(scaled, mean, 0.0)
    std = np.where(scaled, std, 1.0)

    base = np.vstack([p.baseline for p in cohort.patients])
    bmean = base.mean(axis=0)
    bstd = base.std(axis=0)
    binary = np.array(BINARY_BASELINE)
    bscaled = (bstd > _VAR_FLOOR) & ~binary
    bmean = np.where(bscaled, bmean, 0.0)
    bstd = np.where(bscaled, bstd, 1.0)
    return NormStats(mean, std, scaled, bmean, bstd, bscaled)


def zscore_normalize(cohort: Cohort, stats: NormStats) -> Cohort:
    patients = []
    for p in cohort.patients:
        values = (p.values - stats.mean) / stats.std
        baseline = (p.baseline - stats.baseline_mean) / stats.baseline_std
        patients.append(PatientRecord(p.patient_id, p.dates, values, baseline, p.outcome))
    return Cohort(cohort.feature_names, tuple(patients), cohort.baseline_names)


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Invert ``zscore_normalize`` for visit features (round-trips to 1e-9)."""
    return values * stats.std + stats.mean


@dataclass(frozen=True)
class Preprocessor:
    """Bundled training-split statistics applied as one transform."""

    feature_names: tuple[str, ...]
    fallback: np.ndarray
    stats: NormStats

    @classmethod
    def fit(cls, train: Cohort) -> "Preprocessor":
        fallback = feature_medians(train)
        filled = fill_cohort(train, fallback)
        stats = fit_normalization(filled)
        return cls(train.feature_names, fallback, stats)

    def apply(self, cohort: Cohort) -> Cohort:
        if cohort.feature_names != self.feature_names:
            raise ConfigError("cohort features do not match the fitted preprocessor")
        return zscore_normalize(fill_cohort(cohort, self.fallback), self.stats)

    def apply_record(self, record: PatientRecord) -> PatientRecord:
        filled = forward_fill(record, self.fallback)
        values = (filled.values - self.stats.mean) / self.stats.std
        baseline = (filled.baseline - self.stats.baseline_mean) / self.stats.baseline_std
        return PatientRecord(record.patient_id, record.dates, values, baseline, record.outcome)


def kfold_split(patient_ids: list[str], k: int, seed: int) -> list[list[str]]:
    """Deal shuffled patients round-robin into k folds (sizes differ by <= 1)."""
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if k > len(patient_ids):
        raise ConfigError(f"k={k} exceeds the number of patients ({len(patient_ids)})")
    rng = np.random.default_rng(seed)
    order = list(patient_ids)
    rng.shuffle(order)
    folds: list[list[str]] = [[] for _ in range(k)]
    for i, pid in enumerate(order):
        folds[i % k].append(pid)
    return folds
