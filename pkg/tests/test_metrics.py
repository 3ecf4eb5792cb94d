"""Ranking metrics against brute-force oracles and frozen hand values."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aicare.errors import ConfigError, DegenerateInputError, DimensionError
from aicare.metrics import (
    ScoredVisit,
    auprc,
    auroc,
    evaluate_by_cause,
    evaluate_pooled,
    mean_std,
    scored_from_predictions,
)
from aicare.records import Outcome, VisitLabel


def pairwise_auroc(scores, labels):
    """Independent oracle: enumerate every (positive, negative) pair."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    sp = scores[labels == 1]
    sn = scores[labels == 0]
    wins = (sp[:, None] > sn[None, :]).sum()
    ties = (sp[:, None] == sn[None, :]).sum()
    return (wins + 0.5 * ties) / (len(sp) * len(sn))


def sweep_average_precision(scores, labels):
    """Independent oracle: walk distinct thresholds from the top."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    ap = 0.0
    for theta in np.unique(scores)[::-1]:
        fetched = scores >= theta
        group_pos = int(labels[scores == theta].sum())
        if group_pos:
            precision = labels[fetched].sum() / fetched.sum()
            ap += (group_pos / n_pos) * precision
    return ap


def random_instance(rng, n_max=200):
    n = int(rng.integers(2, n_max + 1))
    if rng.random() < 0.5:
        scores = rng.random(n)                       # continuous, no ties
    else:
        scores = rng.integers(0, 10, size=n) / 10.0  # coarse grid, many ties
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():                 # force both classes
        labels[0] = 1 - labels[0]
    return scores, labels


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_scores_equal_gives_half(self):
        assert auroc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_frozen_hand_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_matches_pairwise_oracle_on_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(100):
            scores, labels = random_instance(rng)
            got = auroc(scores, labels)
            want = pairwise_auroc(scores, labels)
            assert abs(got - want) < 1e-9

    def test_invariant_under_monotone_transforms(self):
        rng = np.random.default_rng(7)
        scores = np.round(rng.uniform(-5, 5, size=80), 3)
        labels = rng.integers(0, 2, size=80)
        labels[0], labels[1] = 0, 1
        base = auroc(scores, labels)
        assert auroc(np.exp(scores), labels) == base
        assert auroc(2.0 * scores + 3.0, labels) == base

    def test_complement_labels_sum_to_one(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            scores, labels = random_instance(rng, n_max=60)
            total = auroc(scores, labels) + auroc(scores, 1 - labels)
            assert abs(total - 1.0) < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(9)
        scores, labels = random_instance(rng)
        perm = rng.permutation(len(scores))
        assert auroc(scores, labels) == auroc(scores[perm], labels[perm])

    def test_single_class_rejected(self):
        with pytest.raises(DegenerateInputError):
            auroc([0.1, 0.9], [1, 1])

    def test_empty_rejected(self):
        with pytest.raises(DegenerateInputError):
            auroc([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            auroc([0.1, 0.2], [1])


class TestAuprc:
    def test_all_positive_gives_one(self):
        assert auprc([0.2, 0.9, 0.5], [1, 1, 1]) == 1.0

    def test_frozen_hand_example(self):
        got = auprc([0.9, 0.8, 0.7], [1, 0, 1])
        assert abs(got - 5.0 / 6.0) < 1e-12

    def test_matches_threshold_sweep_oracle_on_random_instances(self):
        rng = np.random.default_rng(2025)
        for _ in range(100):
            scores, labels = random_instance(rng)
            got = auprc(scores, labels)
            want = sweep_average_precision(scores, labels)
            assert abs(got - want) < 1e-9

    def test_random_scores_approach_prevalence(self):
        rng = np.random.default_rng(31)
        n = 10_000
        labels = (rng.random(n) < 0.1).astype(int)
        scores = rng.random(n)
        p = labels.mean()
        assert abs(auprc(scores, labels) - p) < 0.02
        assert abs(auroc(scores, labels) - 0.5) < 0.03

    def test_permutation_invariant(self):
        rng = np.random.default_rng(12)
        scores, labels = random_instance(rng)
        perm = rng.permutation(len(scores))
        assert auprc(scores, labels) == auprc(scores[perm], labels[perm])

    def test_no_positives_rejected(self):
        with pytest.raises(DegenerateInputError):
            auprc([0.4, 0.6], [0, 0])

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 1)),
                    min_size=1, max_size=40).filter(
                        lambda rows: any(y for _, y in rows)))
    @settings(max_examples=80, deadline=None)
    def test_always_in_unit_interval(self, rows):
        scores = [s / 10.0 for s, _ in rows]
        labels = [y for _, y in rows]
        assert 0.0 <= auprc(scores, labels) <= 1.0


class TestMeanStd:
    def test_matches_numpy_and_formats_display(self):
        values = [0.561, 0.492, 0.438, 0.402, 0.467]
        out = mean_std(values)
        assert out["mean"] == np.mean(values)
        assert out["std"] == np.std(values)
        assert out["display"] == f"{out['mean']:.3f} ({out['std']:.3f})"

    def test_display_shape(self):
        assert mean_std([0.5, 0.5])["display"] == "0.500 (0.000)"


def sv(pid, idx, score, label, died=False, cause=None):
    return ScoredVisit(pid, idx, score, label, died, cause)


class TestScoredFromPredictions:
    def test_drops_uncertain_and_maps_labels(self):
        labels = (VisitLabel.LOW, VisitLabel.UNCERTAIN, VisitLabel.HIGH)
        out = scored_from_predictions("P1", [0, 1, 2], [0.2, 0.5, 0.9],
                                      labels, Outcome("died", None, "CVE"))
        assert [(s.visit_index, s.label) for s in out] == [(0, 0), (2, 1)]
        assert all(s.died and s.cause == "CVE" for s in out)


class TestEvaluatePooled:
    def test_reports_metrics_and_counts(self):
        scored = [sv("P0", 0, 0.1, 0), sv("P0", 1, 0.4, 0),
                  sv("P1", 0, 0.35, 1), sv("P1", 1, 0.8, 1)]
        out = evaluate_pooled(scored)
        assert out["auroc"] == 0.75
        assert out["num_visits"] == 4
        assert out["num_positive"] == 2


class TestEvaluateByCause:
    def make_scored(self):
        rng = np.random.default_rng(5)
        scored = []
        # Predictable cause: scores line up with labels.
        for i in range(8):
            label = int(i < 4)
            score = 0.8 + 0.02 * i if label else 0.2 + 0.02 * i
            scored.append(sv(f"C{i}", 0, score, label, died=True, cause="CVE"))
        # Noise cause: scores independent of labels.
        for i in range(8):
            scored.append(sv(f"N{i}", 0, float(rng.random()), int(i % 2),
                             died=True, cause="Cachexia"))
        # Alive pool.
        for i in range(10):
            scored.append(sv(f"A{i}", 0, float(rng.random() * 0.5), 0))
        return scored

    def test_every_cause_has_an_entry(self):
        out = evaluate_by_cause(self.make_scored())
        assert set(out) == {"CVE", "CVD", "GI", "PDAP", "Cancer", "Other",
                            "Infection", "PVD", "Cachexia"}

    def test_subgroup_equals_global_restricted_to_subset(self):
        scored = self.make_scored()
        out = evaluate_by_cause(scored)
        pool = [s for s in scored if (s.died and s.cause == "CVE") or not s.died]
        want = auroc([s.score for s in pool], [s.label for s in pool])
        assert out["CVE"]["auroc"] == want

    def test_planted_predictable_cause_beats_noise_cause(self):
        out = evaluate_by_cause(self.make_scored())
        assert out["CVE"]["auroc"] > out["Cachexia"]["auroc"]

    def test_absent_cause_skipped_with_notice(self):
        out = evaluate_by_cause(self.make_scored())
        assert out["PVD"]["auroc"] is None
        assert "skipped" in out["PVD"]["notice"]
        assert out["PVD"]["num_patients"] == 0

    def test_unknown_cause_rejected(self):
        bad = [sv("P0", 0, 0.5, 1, died=True, cause="XYZ")]
        with pytest.raises(ConfigError):
            evaluate_by_cause(bad)
