"""Imputation, normalization, and fold splitting."""

import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aicare.errors import ConfigError, DomainError
from aicare.preprocess import (
    Preprocessor,
    denormalize,
    feature_medians,
    fill_cohort,
    fit_normalization,
    forward_fill,
    kfold_split,
    zscore_normalize,
)
from aicare.records import Cohort, Outcome, PatientRecord


def make_patient(pid, values, baseline=None, start=dt.date(2010, 1, 1)):
    values = np.asarray(values, dtype=float)
    dates = tuple(start + dt.timedelta(days=30 * t) for t in range(values.shape[0]))
    if baseline is None:
        baseline = np.array([60.0, 1.0, 1.62, 0.0])
    return PatientRecord(pid, dates, values, np.asarray(baseline, dtype=float),
                         Outcome("alive"))


def make_cohort(arrays, names=("a", "b")):
    patients = tuple(make_patient(f"P{i}", v) for i, v in enumerate(arrays))
    return Cohort(tuple(names), patients)


class TestForwardFill:
    def test_fills_from_most_recent_observation(self):
        p = make_patient("P0", [[5.0, 1.0], [np.nan, 2.0], [7.0, 3.0]])
        filled = forward_fill(p, np.zeros(2))
        assert filled.values[:, 0].tolist() == [5.0, 5.0, 7.0]

    def test_record_without_gaps_is_unchanged(self):
        p = make_patient("P0", [[1.0, 2.0], [3.0, 4.0]])
        filled = forward_fill(p, np.zeros(2))
        np.testing.assert_array_equal(filled.values, p.values)

    def test_leading_gap_takes_fallback(self):
        p = make_patient("P0", [[np.nan, 0.0], [4.0, 0.0]])
        filled = forward_fill(p, np.array([38.0, 0.0]))
        assert filled.values[:, 0].tolist() == [38.0, 4.0]

    def test_does_not_mutate_input(self):
        p = make_patient("P0", [[np.nan, 1.0], [2.0, 1.0]])
        forward_fill(p, np.zeros(2))
        assert np.isnan(p.values[0, 0])

    def test_fallback_length_mismatch_rejected(self):
        p = make_patient("P0", [[1.0, 2.0]])
        with pytest.raises(ConfigError):
            forward_fill(p, np.zeros(3))

    @given(st.lists(st.lists(st.one_of(st.none(),
                                       st.floats(-50, 50, allow_nan=False)),
                             min_size=2, max_size=2),
                    min_size=1, max_size=8))
    @settings(max_examples=100, deadline=None)
    def test_idempotent_and_total(self, rows):
        values = np.array([[np.nan if c is None else c for c in row]
                           for row in rows])
        p = make_patient("P0", values)
        fallback = np.array([0.5, -1.5])
        once = forward_fill(p, fallback)
        twice = forward_fill(once, fallback)
        assert not np.isnan(once.values).any()
        np.testing.assert_array_equal(once.values, twice.values)

    def test_observed_values_never_change(self):
        values = np.array([[1.0, np.nan], [np.nan, 2.0], [3.0, np.nan]])
        p = make_patient("P0", values)
        filled = forward_fill(p, np.zeros(2))
        mask = ~np.isnan(values)
        np.testing.assert_array_equal(filled.values[mask], values[mask])


class TestFeatureMedians:
    def test_median_ignores_missing(self):
        cohort = make_cohort([[[1.0, np.nan], [3.0, 7.0]],
                              [[5.0, np.nan], [np.nan, 9.0]]])
        med = feature_medians(cohort)
        assert med.tolist() == [3.0, 8.0]

    def test_never_observed_feature_falls_back_to_zero(self):
        cohort = make_cohort([[[1.0, np.nan]], [[2.0, np.nan]]])
        assert feature_medians(cohort)[1] == 0.0

    def test_empty_cohort_rejected(self):
        with pytest.raises(DomainError):
            feature_medians(Cohort(("a",), ()))


class TestNormalization:
    def cohort(self):
        rng = np.random.default_rng(3)
        arrays = [rng.normal(10.0, 4.0, size=(5, 2)) for _ in range(6)]
        return make_cohort(arrays)

    def test_training_split_becomes_standard(self):
        cohort = self.cohort()
        stats = fit_normalization(cohort)
        normed = zscore_normalize(cohort, stats)
        stacked = np.vstack([p.values for p in normed.patients])
        assert np.abs(stacked.mean(axis=0)).max() < 1e-9
        assert np.abs(stacked.std(axis=0) - 1.0).max() < 1e-9

    def test_value_at_mean_maps_to_zero_and_mean_plus_std_to_one(self):
        cohort = self.cohort()
        stats = fit_normalization(cohort)
        z = (stats.mean - stats.mean) / stats.std
        assert z.tolist() == [0.0, 0.0]
        z1 = ((stats.mean + stats.std) - stats.mean) / stats.std
        np.testing.assert_allclose(z1, 1.0, atol=1e-12)

    def test_zero_variance_feature_passes_through(self):
        arrays = [np.array([[7.0, 1.0], [7.0, 2.0]]),
                  np.array([[7.0, 3.0], [7.0, 4.0]])]
        cohort = make_cohort(arrays)
        stats = fit_normalization(cohort)
        assert not stats.scaled[0] and stats.scaled[1]
        normed = zscore_normalize(cohort, stats)
        assert normed.patients[0].values[0, 0] == 7.0

    def test_binary_baseline_fields_untouched(self):
        patients = tuple(
            make_patient(f"P{i}", [[float(i), 1.0]],
                         baseline=[50.0 + i, float(i % 2), 1.6 + 0.01 * i,
                                   float(i % 3 == 0)])
            for i in range(6))
        cohort = Cohort(("a", "b"), patients)
        stats = fit_normalization(cohort)
        assert not stats.baseline_scaled[1] and not stats.baseline_scaled[3]
        normed = zscore_normalize(cohort, stats)
        genders = [p.baseline[1] for p in normed.patients]
        assert set(genders) == {0.0, 1.0}

    def test_refuses_unimputed_cohort(self):
        cohort = make_cohort([[[np.nan, 1.0]]])
        with pytest.raises(DomainError):
            fit_normalization(cohort)

    def test_denormalize_round_trip(self):
        cohort = self.cohort()
        stats = fit_normalization(cohort)
        normed = zscore_normalize(cohort, stats)
        for orig, after in zip(cohort.patients, normed.patients):
            back = denormalize(after.values, stats)
            np.testing.assert_allclose(back, orig.values, atol=1e-9)


class TestPreprocessor:
    def test_fit_then_apply_matches_manual_pipeline(self):
        rng = np.random.default_rng(11)
        train = make_cohort([rng.normal(5, 2, size=(4, 2)) for _ in range(5)])
        prep = Preprocessor.fit(train)
        manual = zscore_normalize(fill_cohort(train, prep.fallback), prep.stats)
        auto = prep.apply(train)
        for a, b in zip(manual.patients, auto.patients):
            np.testing.assert_array_equal(a.values, b.values)

    def test_apply_record_agrees_with_apply(self):
        rng = np.random.default_rng(12)
        arrays = [rng.normal(5, 2, size=(4, 2)) for _ in range(5)]
        arrays[2][1, 0] = np.nan
        train = make_cohort(arrays)
        prep = Preprocessor.fit(train)
        whole = prep.apply(train)
        single = prep.apply_record(train.patients[2])
        np.testing.assert_array_equal(single.values, whole.patients[2].values)
        np.testing.assert_array_equal(single.baseline, whole.patients[2].baseline)

    def test_feature_name_mismatch_rejected(self):
        train = make_cohort([[[1.0, 2.0]]])
        other = make_cohort([[[1.0, 2.0]]], names=("x", "y"))
        prep = Preprocessor.fit(train)
        with pytest.raises(ConfigError):
            prep.apply(other)


class TestKfoldSplit:
    def test_ten_patients_ten_folds_are_singletons(self):
        folds = kfold_split([f"P{i}" for i in range(10)], 10, seed=1)
        assert sorted(len(f) for f in folds) == [1] * 10

    def test_same_seed_same_plan(self):
        ids = [f"P{i}" for i in range(23)]
        assert kfold_split(ids, 5, seed=9) == kfold_split(ids, 5, seed=9)

    def test_656_patients_in_10_folds(self):
        folds = kfold_split([f"P{i:04d}" for i in range(656)], 10, seed=0)
        sizes = sorted(len(f) for f in folds)
        assert sizes == [65] * 4 + [66] * 6

    @given(st.integers(2, 8), st.integers(0, 2**20))
    @settings(max_examples=60, deadline=None)
    def test_folds_partition_the_patient_set(self, k, seed):
        ids = [f"P{i}" for i in range(20)]
        folds = kfold_split(ids, k, seed)
        flat = [pid for fold in folds for pid in fold]
        assert sorted(flat) == sorted(ids)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_bad_k_rejected(self):
        with pytest.raises(ConfigError):
            kfold_split(["P0", "P1"], 1, seed=0)
        with pytest.raises(ConfigError):
            kfold_split(["P0", "P1"], 3, seed=0)
