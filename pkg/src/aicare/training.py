"""Masked training loop with Adam and patient-level cross-validation.

The loss is binary cross-entropy over Low and High visits only; Uncertain
visits contribute exactly zero to both the loss value and every parameter
gradient. Each batch runs one tape per patient and sums the per-patient
gradients, which is identical to one big batch tape but keeps memory flat.

Cross-validation deals patients into k folds; for every fold the imputation
fallbacks and normalization moments are fitted on that fold's training
patients only. A slice of the training patients is held out as a validation
set for early stopping on AUPRC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, EmptyMaskError, NumericError
from .metrics import ScoredVisit, auprc, auroc, evaluate_pooled, mean_std, scored_from_predictions
from .model import ModelConfig, ModelParams, forward_batch, init_params
from .preprocess import Preprocessor, kfold_split
from .records import Cohort, LabeledCohort, VisitLabel, label_cohort


@dataclass(frozen=True)
class TrainConfig:
    num_folds: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0
    hidden_size: int = 16
    activation: str = "softmax"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(
                f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def masked_bce(predictions, labels: list[VisitLabel]) -> Tensor:
    """Mean BCE over non-Uncertain visits.

    ``predictions`` is a tensor of risks in (0, 1) aligned with ``labels``.
    Uncertain entries are multiplied by an exactly-zero weight, so neither
    the value nor any gradient can depend on them.
    """
    predictions = ad.as_tensor(predictions)
    if predictions.data.ndim != 1 or predictions.data.shape[0] != len(labels):
        raise DimensionError(
            f"predictions shape {predictions.data.shape} does not match "
            f"{len(labels)} labels")
    weights = np.array([0.0 if lab is VisitLabel.UNCERTAIN else 1.0 for lab in labels])
    count = weights.sum()
    if count == 0:
        raise EmptyMaskError("all visits are Uncertain; the masked loss is undefined")
    targets = np.array([1.0 if lab is VisitLabel.HIGH else 0.0 for lab in labels])
    p = ad.clip(predictions, 1e-12, 1.0 - 1e-12)
    terms = ad.neg(ad.add(ad.mul(targets, ad.log(p)),
                          ad.mul(1.0 - targets, ad.log(ad.sub(1.0, p)))))
    return ad.mul(ad.ssum(ad.mul(weights, terms)), 1.0 / count)


@dataclass
class AdamState:
    """First/second moment buffers per parameter, plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update in place. Aborts without touching parameters if any
    gradient is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / (1.0 - beta1 ** t)
        v_hat = state.v[name] / (1.0 - beta2 ** t)
        tensor.data -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return state


def _labeled_ts(labels) -> list[int]:
    return [i + 1 for i, lab in enumerate(labels) if lab is not VisitLabel.UNCERTAIN]


def _patient_loss_grads(record, labels, params: ModelParams, config: ModelConfig
                        ) -> tuple[float, float, dict[str, np.ndarray]]:
    """Sum of per-visit BCE terms for one patient plus gradients of that sum."""
    ts = _labeled_ts(labels)
    targets = np.array([1.0 if labels[t - 1] is VisitLabel.HIGH else 0.0 for t in ts])
    named = params.named()
    with ad.Tape() as tape:
        risk, _, _ = forward_batch(record, ts, params, config)
        p = ad.clip(risk, 1e-12, 1.0 - 1e-12)
        terms = ad.neg(ad.add(ad.mul(targets, ad.log(p)),
                              ad.mul(1.0 - targets, ad.log(ad.sub(1.0, p)))))
        total = ad.ssum(terms)
        tape.backward(total)
    grads = {name: tape.gradient(t) for name, t in named.items()}
    return total.item(), float(len(ts)), grads


def _predict_cohort(data: LabeledCohort, params: ModelParams, config: ModelConfig
                    ) -> list[ScoredVisit]:
    scored = []
    for record in data.cohort:
        labels = data.labels_for(record.patient_id)
        ts = _labeled_ts(labels)
        if not ts:
            continue
        risk, _, _ = forward_batch(record, ts, params, config)
        scored.extend(scored_from_predictions(
            record.patient_id, ts, risk.data, [labels[t - 1] for t in ts],
            record.outcome))
    return scored


def _validation_metrics(scored: list[ScoredVisit]) -> tuple[float | None, float | None]:
    labels = [s.label for s in scored]
    if not scored or sum(labels) in (0, len(labels)):
        return None, None
    scores = [s.score for s in scored]
    return auprc(scores, labels), auroc(scores, labels)


@dataclass
class FoldResult:
    fold_index: int
    params: ModelParams
    preprocessor: Preprocessor
    history: list[dict] = field(default_factory=list)
    test_scored: list[ScoredVisit] = field(default_factory=list)
    test_auroc: float | None = None
    test_auprc: float | None = None


def train_fold(train: LabeledCohort, valid: LabeledCohort | None,
               config: TrainConfig, model_config: ModelConfig) -> tuple[ModelParams, list[dict]]:
    """Fit one model on a prepared training split.

    Patients are shuffled per epoch with a seeded generator and processed in
    batches; one Adam step per batch on the mean masked BCE. Early stopping
    tracks validation AUPRC with the configured patience and restores the
    best parameters. Returns (best params, per-epoch history).
    """
    params = init_params(model_config)
    if config.max_epochs == 0:
        return params, []
    named = params.named()
    state = AdamState.init(named)
    rng = np.random.default_rng(config.seed)

    trainable = [p for p in train.cohort
                 if _labeled_ts(train.labels_for(p.patient_id))]
    if not trainable:
        raise EmptyMaskError("training split has no Low or High visits")

    best_metric = -np.inf
    best_params = params.copy()
    best_epoch = 0
    stall = 0
    history = []
    for epoch in range(1, config.max_epochs + 1):
        order = np.arange(len(trainable))
        rng.shuffle(order)
        epoch_loss = 0.0
        epoch_count = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [trainable[i] for i in order[start:start + config.batch_size]]
            grad_sum = {k: np.zeros_like(t.data) for k, t in named.items()}
            loss_sum = 0.0
            count = 0.0
            for record in batch:
                loss, n, grads = _patient_loss_grads(
                    record, train.labels_for(record.patient_id), params, model_config)
                loss_sum += loss
                count += n
                for k in grad_sum:
                    grad_sum[k] += grads[k]
            scale = 1.0 / count
            mean_grads = {k: g * scale for k, g in grad_sum.items()}
            adam_step(named, mean_grads, state, learning_rate=config.learning_rate)
            epoch_loss += loss_sum
            epoch_count += count

        entry = {"epoch": epoch, "train_loss": epoch_loss / epoch_count,
                 "valid_auprc": None, "valid_auroc": None}
        if valid is not None and len(valid.cohort):
            v_auprc, v_auroc = _validation_metrics(
                _predict_cohort(valid, params, model_config))
            entry["valid_auprc"] = v_auprc
            entry["valid_auroc"] = v_auroc
            if v_auprc is not None:
                if v_auprc > best_metric:
                    best_metric = v_auprc
                    best_params = params.copy()
                    best_epoch = epoch
                    stall = 0
                else:
                    stall += 1
        history.append(entry)
        if valid is not None and stall >= config.patience:
            break

    if np.isfinite(best_metric):
        history.append({"epoch": best_epoch, "event": "restored_best",
                        "valid_auprc": best_metric})
        return best_params, history
    return params, history


@dataclass
class CrossValidationResult:
    folds: list[FoldResult]
    fold_ids: list[list[str]]
    summary: dict
    pooled_scored: list[ScoredVisit]


def _split_validation(patients: list, fraction: float, seed: int):
    if fraction <= 0.0 or len(patients) < 2:
        return patients, []
    rng = np.random.default_rng(seed)
    order = np.arange(len(patients))
    rng.shuffle(order)
    n_valid = max(1, int(round(len(patients) * fraction)))
    if n_valid >= len(patients):
        n_valid = len(patients) - 1
    valid_idx = set(order[:n_valid].tolist())
    train = [p for i, p in enumerate(patients) if i not in valid_idx]
    valid = [p for i, p in enumerate(patients) if i in valid_idx]
    return train, valid


def run_fold(cohort: Cohort, labeled: LabeledCohort, test_ids: set[str],
             config: TrainConfig, fold_index: int) -> FoldResult:
    """Train one fold and score its held-out patients."""
    train_patients = [p for p in cohort.patients if p.patient_id not in test_ids]
    test_patients = [p for p in cohort.patients if p.patient_id in test_ids]
    fit_patients, valid_patients = _split_validation(
        train_patients, config.validation_fraction, config.seed + fold_index)

    prep = Preprocessor.fit(Cohort(cohort.feature_names, tuple(fit_patients),
                                   cohort.baseline_names))

    def prepared(patients):
        sub = Cohort(cohort.feature_names, tuple(patients), cohort.baseline_names)
        ready = prep.apply(sub)
        return LabeledCohort(ready, {p.patient_id: labeled.labels[p.patient_id]
                                     for p in patients}, labeled.data_end_date)

    model_config = ModelConfig(
        num_features=len(cohort.feature_names),
        baseline_dim=len(cohort.baseline_names),
        hidden_size=config.hidden_size,
        activation=config.activation,
        seed=config.seed + fold_index,
    )
    params, history = train_fold(prepared(fit_patients),
                                 prepared(valid_patients) if valid_patients else None,
                                 config, model_config)
    test_scored = _predict_cohort(prepared(test_patients), params, model_config)
    result = FoldResult(fold_index, params, prep, history, test_scored)
    labels = [s.label for s in test_scored]
    if test_scored and 0 < sum(labels) < len(labels):
        pooled_eval = evaluate_pooled(test_scored)
        result.test_auroc = pooled_eval["auroc"]
        result.test_auprc = pooled_eval["auprc"]
    return result


def _run_fold_task(args) -> FoldResult:
    cohort, labeled, test_ids, config, fold_index = args
    return run_fold(cohort, labeled, set(test_ids), config, fold_index)


def train_single(cohort: Cohort, config: TrainConfig,
                 data_end_date=None) -> FoldResult:
    """Fit one model on the whole cohort (no held-out fold).

    Early stopping still uses the internal validation split. The result has
    no test predictions; use it when the goal is a deployable model or a
    whole-cohort attention analysis rather than an unbiased estimate.
    """
    labeled = label_cohort(cohort, data_end_date)
    return run_fold(cohort, labeled, set(), config, 0)


def cross_validate(cohort: Cohort, config: TrainConfig,
                   data_end_date=None, progress=None, jobs: int = 1
                   ) -> CrossValidationResult:
    """Patient-level k-fold cross-validation over a raw cohort.

    Labels use one shared data-end date (defaulting to the cohort's last
    visit); all feature statistics are refitted per fold on that fold's
    training patients. Fold metrics are summarized as mean (std) and test
    predictions are pooled across folds for cause-level analysis.
    ``jobs`` > 1 trains folds in separate processes; results are collected
    in fold order so the output does not depend on scheduling.
    """
    labeled = label_cohort(cohort, data_end_date)
    ids = [p.patient_id for p in cohort.patients]
    fold_ids = kfold_split(ids, config.num_folds, config.seed)
    tasks = [(cohort, labeled, test_set, config, fold_index)
             for fold_index, test_set in enumerate(fold_ids)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_run_fold_task, tasks))
    else:
        folds = [_run_fold_task(t) for t in tasks]

    pooled: list[ScoredVisit] = []
    for result in folds:
        pooled.extend(result.test_scored)
        if progress is not None:
            progress(result.fold_index, result)

    aurocs = [f.test_auroc for f in folds if f.test_auroc is not None]
    auprcs = [f.test_auprc for f in folds if f.test_auprc is not None]
    summary = {
        "num_folds": config.num_folds,
        "auroc": mean_std(aurocs) if aurocs else None,
        "auprc": mean_std(auprcs) if auprcs else None,
        "folds_evaluated": len(aurocs),
    }
    return CrossValidationResult(folds, fold_ids, summary, pooled)


def write_history(path, history: list[dict]) -> None:
    """Training log as JSON lines, one epoch per line."""
    with open(path, "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
