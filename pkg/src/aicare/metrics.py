"""Ranking metrics over scored visits and cause-of-death breakdowns.

AUROC uses the rank-sum (Mann-Whitney) form with half credit for score
ties. AUPRC is average precision: walking thresholds downward through the
distinct scores, each group of positives contributes its recall step times
the precision at that threshold, with equal scores always handled as one
threshold group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .records import CAUSE_CODES, VisitLabel


@dataclass(frozen=True)
class ScoredVisit:
    """One labeled, scored visit kept for pooled evaluation."""

    patient_id: str
    visit_index: int
    score: float
    label: int                  # 1 = death within a year
    died: bool                  # patient-level outcome
    cause: str | None


def _check_pairs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise DimensionError(
            f"scores and labels must be equal-length vectors, got "
            f"{scores.shape} and {labels.shape}")
    if scores.size == 0:
        raise DegenerateInputError("cannot rank an empty score list")
    return scores, labels.astype(np.int64)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the mean rank of their block."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 1/2)."""
    scores, labels = _check_pairs(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError(
            f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = _average_ranks(scores)
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Average precision with tied scores treated as one threshold group."""
    scores, labels = _check_pairs(scores, labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise DegenerateInputError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        group_pos = int(y[i:j + 1].sum())
        tp += group_pos
        seen = j + 1
        if group_pos:
            ap += (group_pos / n_pos) * (tp / seen)
        i = j + 1
    return ap


def mean_std(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    m = float(arr.mean())
    s = float(arr.std())
    return {"mean": m, "std": s, "display": f"{m:.3f} ({s:.3f})"}


def scored_from_predictions(patient_id, ts, risks, labels, outcome) -> list[ScoredVisit]:
    """Pair per-visit risks with binary labels, dropping Uncertain visits."""
    out = []
    for t, risk, label in zip(ts, risks, labels):
        if label is VisitLabel.UNCERTAIN:
            continue
        out.append(ScoredVisit(patient_id, t, float(risk),
                               1 if label is VisitLabel.HIGH else 0,
                               outcome.died, outcome.cause))
    return out


def evaluate_pooled(scored: list[ScoredVisit]) -> dict:
    scores = [s.score for s in scored]
    labels = [s.label for s in scored]
    return {"auroc": auroc(scores, labels), "auprc": auprc(scores, labels),
            "num_visits": len(scored), "num_positive": int(sum(labels))}


def evaluate_by_cause(scored: list[ScoredVisit]) -> dict:
    """Per-cause AUROC: visits of patients who died of that cause against
    all visits of alive patients. Causes without positive visits are
    reported with a notice instead of a number."""
    for s in scored:
        if s.cause is not None and s.cause not in CAUSE_CODES:
            raise ConfigError(f"unknown cause code {s.cause!r} in scored visits")
    alive_pool = [s for s in scored if not s.died]
    out = {}
    for cause in CAUSE_CODES:
        cause_visits = [s for s in scored if s.died and s.cause == cause]
        n_patients = len({s.patient_id for s in cause_visits})
        entry = {"num_patients": n_patients, "num_visits": len(cause_visits)}
        pool = cause_visits + alive_pool
        labels = [s.label for s in pool]
        if not cause_visits or sum(labels) == 0 or sum(labels) == len(labels):
            entry["auroc"] = None
            entry["notice"] = "skipped: no positive visits for this cause"
        else:
            entry["auroc"] = auroc([s.score for s in pool], labels)
        out[cause] = entry
    return out
