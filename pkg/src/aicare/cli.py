"""Command line driver: generate, train, evaluate, interpret, predict, serve.

Every subcommand reads and writes plain files (CSV cohorts, JSON configs
and artifacts) so runs can be scripted and diffed. Failures map to stable
exit codes so scripts can branch on what went wrong; see the epilog of
``aicare --help``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .errors import AiCareError, ConfigError, IntegrityError, ParseError
from .interpret import (analyze_features, cod_heatmap, collect_importance,
                        report_table, write_importance_csv, write_json)
from .metrics import evaluate_by_cause, evaluate_pooled, mean_std
from .model import forward_visits, load_checkpoint, save_checkpoint
from .records import (Cohort, LabeledCohort, VisitLabel, label_cohort,
                      load_cohort, write_cohort)
from .service import ServeConfig, create_app, preprocessor_from_extras, preprocessor_to_extras
from .synthetic import (generate_synthetic, load_spec, pd_default_spec,
                        separable_spec, write_spec)
from .training import (TrainConfig, cross_validate, train_single, write_history)

EXIT_CODE_HELP = """\
exit codes:
  0  success
  1  unclassified failure
  2  usage error (bad flags or arguments)
  3  parse error (malformed input file)
  4  config error (inconsistent or invalid settings)
  5  integrity error (data contradicts itself)
  6  io error (missing or unwritable files)
  7  numeric error (non-finite values during computation)
"""


def _resolve_seed(value: int | None) -> int:
    """--seed beats the AICARE_SEED environment variable beats 0."""
    if value is not None:
        return value
    env = os.environ.get("AICARE_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"AICARE_SEED must be an integer, got {env!r}")


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path=path, line=exc.lineno)


def _load_cohort_args(args) -> Cohort:
    return load_cohort(args.visits, args.baseline, args.outcomes)


# ---------------------------------------------------------------- generate

def cmd_generate(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.spec:
        spec = load_spec(args.spec)
    elif args.preset == "separable":
        spec = separable_spec(args.patients or 80)
    else:
        spec = pd_default_spec(args.patients or 656)
    cohort, truth = generate_synthetic(spec, seed)

    os.makedirs(args.out, exist_ok=True)
    paths = {name: os.path.join(args.out, name + ".csv")
             for name in ("visits", "baseline", "outcomes")}
    write_cohort(cohort, paths["visits"], paths["baseline"], paths["outcomes"])
    write_spec(os.path.join(args.out, "spec.json"), spec)
    write_json(os.path.join(args.out, "truth.json"), truth)

    s = truth["stats"]
    print(f"generated {s['num_patients']} patients, {s['num_visits']} visits "
          f"({s['visits_per_patient']:.1f}/patient), "
          f"positive rate {100 * s['positive_rate']:.1f}%, "
          f"mortality {100 * s['mortality_rate']:.1f}% -> {args.out}")
    return 0


# ------------------------------------------------------------------- train

def _train_config_from_args(args) -> TrainConfig:
    base = {}
    if args.config:
        base = _read_json(args.config)
        unknown = set(base) - {f.name for f in dataclasses.fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {sorted(unknown)}")
    overrides = {
        "num_folds": args.folds, "max_epochs": args.epochs,
        "batch_size": args.batch_size, "learning_rate": args.lr,
        "patience": args.patience, "hidden_size": args.hidden,
        "activation": args.activation,
        "validation_fraction": args.validation_fraction,
    }
    merged = dict(base)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    merged["seed"] = _resolve_seed(args.seed if args.seed is not None
                                   else base.get("seed"))
    return TrainConfig(**merged)


def _fold_dir(model_dir: str, fold_index: int) -> str:
    return os.path.join(model_dir, f"fold_{fold_index}")


def _write_fold(model_dir: str, result, config: TrainConfig,
                cohort: Cohort, data_end_date) -> None:
    fold_dir = _fold_dir(model_dir, result.fold_index)
    os.makedirs(fold_dir, exist_ok=True)
    extras = {
        "feature_names": list(cohort.feature_names),
        "baseline_names": list(cohort.baseline_names),
        "fold_index": result.fold_index,
        "data_end_date": data_end_date.isoformat(),
        "train_config": config.to_dict(),
    }
    extras.update(preprocessor_to_extras(result.preprocessor))
    from .model import ModelConfig
    model_config = ModelConfig(
        num_features=len(cohort.feature_names),
        baseline_dim=len(cohort.baseline_names),
        hidden_size=config.hidden_size, activation=config.activation,
        seed=config.seed + result.fold_index)
    save_checkpoint(os.path.join(fold_dir, "checkpoint.json"),
                    result.params, model_config, extras)
    write_history(os.path.join(fold_dir, "history.jsonl"), result.history)


def cmd_train(args) -> int:
    config = _train_config_from_args(args)
    cohort = _load_cohort_args(args)
    labeled = label_cohort(cohort)
    os.makedirs(args.out, exist_ok=True)

    if config.num_folds == 1:
        result = train_single(cohort, config)
        _write_fold(args.out, result, config, cohort, labeled.data_end_date)
        foldplan = {"seed": config.seed, "num_folds": 1,
                    "folds": [[p.patient_id for p in cohort.patients]]}
        metrics = {"mode": "single", "num_folds": 1, "auroc": None, "auprc": None,
                   "note": "single-model training has no held-out fold; "
                           "use num_folds >= 2 for unbiased estimates"}
    else:
        cv = cross_validate(cohort, config, jobs=args.jobs)
        for result in cv.folds:
            _write_fold(args.out, result, config, cohort, labeled.data_end_date)
        foldplan = {"seed": config.seed, "num_folds": config.num_folds,
                    "folds": cv.fold_ids}
        metrics = {
            "mode": "cross_validation",
            "num_folds": config.num_folds,
            "summary": cv.summary,
            "folds": [{"fold": f.fold_index, "auroc": f.test_auroc,
                       "auprc": f.test_auprc,
                       "num_test_visits": len(f.test_scored)}
                      for f in cv.folds],
            "by_cause": evaluate_by_cause(cv.pooled_scored),
        }

    write_json(os.path.join(args.out, "foldplan.json"), foldplan)
    write_json(os.path.join(args.out, "config.json"), {
        "train": config.to_dict(),
        "feature_names": list(cohort.feature_names),
        "baseline_names": list(cohort.baseline_names),
        "data_end_date": labeled.data_end_date.isoformat(),
    })
    write_json(os.path.join(args.out, "metrics.json"), metrics)

    if metrics.get("summary") and metrics["summary"].get("auroc"):
        print(f"AUROC {metrics['summary']['auroc']['display']}  "
              f"AUPRC {metrics['summary']['auprc']['display']}")
    print(f"model written to {args.out}")
    return 0


# ------------------------------------------------------------ shared loads

def _load_model_dir(model_dir: str):
    """Foldplan plus each fold's checkpoint (params, config, extras)."""
    plan_path = os.path.join(model_dir, "foldplan.json")
    if not os.path.exists(plan_path):
        raise ConfigError(f"{model_dir} has no foldplan.json; is it a model directory?")
    plan = _read_json(plan_path)
    folds = []
    for fold_index in range(plan["num_folds"]):
        ckpt = os.path.join(_fold_dir(model_dir, fold_index), "checkpoint.json")
        params, model_config, extras = load_checkpoint(ckpt)
        folds.append({"params": params, "config": model_config, "extras": extras,
                      "test_ids": list(plan["folds"][fold_index])})
    return plan, folds


def _scored_out_of_fold(cohort: Cohort, labeled, folds) -> list:
    from .metrics import scored_from_predictions
    by_id = {p.patient_id: p for p in cohort.patients}
    plan_ids = [pid for fold in folds for pid in fold["test_ids"]]
    missing = sorted(set(plan_ids) - set(by_id))
    if missing:
        raise IntegrityError(
            f"foldplan references {len(missing)} patients absent from the "
            f"cohort, first few: {missing[:5]}")
    scored = []
    for fold in folds:
        prep = preprocessor_from_extras(fold["extras"], cohort.feature_names)
        for pid in fold["test_ids"]:
            record = by_id[pid]
            labels = labeled.labels[pid]
            ts = [i + 1 for i, lab in enumerate(labels)
                  if lab is not VisitLabel.UNCERTAIN]
            if not ts:
                continue
            ready = prep.apply_record(record)
            preds = forward_visits(ready, ts, fold["params"], fold["config"])
            scored.extend(scored_from_predictions(
                pid, ts, [p.risk for p in preds],
                [labels[t - 1] for t in ts], record.outcome))
    return scored


def cmd_evaluate(args) -> int:
    cohort = _load_cohort_args(args)
    labeled = label_cohort(cohort)
    plan, folds = _load_model_dir(args.model)
    if plan["num_folds"] < 2:
        raise ConfigError("evaluate needs a cross-validated model directory "
                          "(num_folds >= 2)")
    scored = _scored_out_of_fold(cohort, labeled, folds)

    per_fold = []
    for fold in folds:
        ids = set(fold["test_ids"])
        sub = [s for s in scored if s.patient_id in ids]
        labels = [s.label for s in sub]
        if sub and 0 < sum(labels) < len(labels):
            ev = evaluate_pooled(sub)
            per_fold.append({"auroc": ev["auroc"], "auprc": ev["auprc"],
                             "num_test_visits": len(sub)})
        else:
            per_fold.append({"auroc": None, "auprc": None,
                             "num_test_visits": len(sub)})
    aurocs = [f["auroc"] for f in per_fold if f["auroc"] is not None]
    auprcs = [f["auprc"] for f in per_fold if f["auprc"] is not None]
    metrics = {
        "mode": "evaluate",
        "num_folds": plan["num_folds"],
        "summary": {
            "num_folds": plan["num_folds"],
            "auroc": mean_std(aurocs) if aurocs else None,
            "auprc": mean_std(auprcs) if auprcs else None,
            "folds_evaluated": len(aurocs),
        },
        "folds": [dict(fold=i, **f) for i, f in enumerate(per_fold)],
        "by_cause": evaluate_by_cause(scored),
    }
    payload = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
        print(f"metrics written to {args.out}")
    else:
        print(payload)
    return 0


# --------------------------------------------------------------- interpret

def cmd_interpret(args) -> int:
    cohort = _load_cohort_args(args)
    labeled = label_cohort(cohort)
    plan, folds = _load_model_dir(args.model)

    records = []
    if plan["num_folds"] >= 2:
        by_id = {p.patient_id: p for p in cohort.patients}
        for fold in folds:
            present = [pid for pid in fold["test_ids"] if pid in by_id]
            sub = Cohort(cohort.feature_names,
                         tuple(by_id[pid] for pid in present),
                         cohort.baseline_names)
            sub_labeled = LabeledCohort(
                sub, {pid: labeled.labels[pid] for pid in present},
                labeled.data_end_date)
            prep = preprocessor_from_extras(fold["extras"], cohort.feature_names)
            records.extend(collect_importance(
                sub_labeled, prep, fold["params"], fold["config"],
                activation=args.activation))
    else:
        fold = folds[0]
        prep = preprocessor_from_extras(fold["extras"], cohort.feature_names)
        records = collect_importance(labeled, prep, fold["params"],
                                     fold["config"], activation=args.activation)

    analysis = analyze_features(records, cohort.feature_names, num_bins=args.bins)
    heatmap = cod_heatmap(records, cohort.feature_names)

    os.makedirs(args.out, exist_ok=True)
    write_importance_csv(os.path.join(args.out, "importance.csv"), records)
    write_json(os.path.join(args.out, "curves.json"), analysis)
    write_json(os.path.join(args.out, "heatmap.json"), heatmap)
    table = report_table(analysis)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    print(f"artifacts written to {args.out}")
    return 0


# ----------------------------------------------------------------- predict

def cmd_predict(args) -> int:
    params, model_config, extras = load_checkpoint(args.checkpoint)
    cohort = load_cohort(args.visits, args.baseline, args.outcomes,
                         expected_features=tuple(extras["feature_names"]))
    prep = preprocessor_from_extras(extras, cohort.feature_names)
    patients = cohort.patients
    if args.patient:
        try:
            patients = (cohort.by_id(args.patient),)
        except KeyError:
            raise ConfigError(f"unknown patient id {args.patient!r}")
    out = []
    for record in patients:
        ready = prep.apply_record(record)
        ts = list(range(1, record.num_visits + 1))
        preds = forward_visits(ready, ts, params, model_config)
        out.append({
            "patient_id": record.patient_id,
            "visits": [{"visit_index": p.visit_index,
                        "date": record.dates[p.visit_index - 1].isoformat(),
                        "risk": p.risk} for p in preds],
        })
    payload = json.dumps({"patients": out}, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(payload + "\n")
        print(f"predictions written to {args.out}")
    else:
        print(payload)
    return 0


# ------------------------------------------------------------------- serve

def cmd_serve(args) -> int:
    config = ServeConfig(
        checkpoint_path=args.checkpoint,
        visits_path=args.visits, baseline_path=args.baseline,
        outcomes_path=args.outcomes, analysis_path=args.analysis,
        spec_path=args.spec,
        auth_token=args.token or os.environ.get("AICARE_TOKEN"),
        anonymize_dates=args.anonymize_dates,
        disclose_outcomes=not args.hide_outcomes,
    )
    app = create_app(config)
    import uvicorn
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aicare",
        description="dynamic mortality risk modeling for longitudinal "
                    "clinical records",
        epilog=EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=("default", "separable"), default="default")
    p.add_argument("--patients", type=int, default=None)
    p.add_argument("--spec", default=None, help="cohort spec JSON (overrides preset)")
    p.add_argument("--seed", type=int, default=None,
                   help="falls back to AICARE_SEED, then 0")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit models with cross-validation")
    for flag in ("--visits", "--baseline", "--outcomes"):
        p.add_argument(flag, required=True)
    p.add_argument("--out", required=True, help="model directory to create")
    p.add_argument("--config", default=None, help="training config JSON")
    p.add_argument("--folds", type=int, default=None,
                   help="1 trains a single model on everything")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--activation", choices=("softmax", "sparsemax"), default=None)
    p.add_argument("--validation-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1,
                   help="train folds in this many parallel processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a model directory on a cohort")
    p.add_argument("--model", required=True)
    for flag in ("--visits", "--baseline", "--outcomes"):
        p.add_argument(flag, required=True)
    p.add_argument("--out", default=None, help="metrics JSON path (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("interpret", help="attention curves, shapes, heatmap")
    p.add_argument("--model", required=True)
    for flag in ("--visits", "--baseline", "--outcomes"):
        p.add_argument(flag, required=True)
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--activation", choices=("softmax", "sparsemax"),
                   default="sparsemax")
    p.add_argument("--bins", type=int, default=40)
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("predict", help="per-visit risks for a cohort")
    p.add_argument("--checkpoint", required=True)
    for flag in ("--visits", "--baseline", "--outcomes"):
        p.add_argument(flag, required=True)
    p.add_argument("--patient", default=None, help="single patient id")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="HTTP API for browsing and prediction")
    p.add_argument("--checkpoint", required=True)
    for flag in ("--visits", "--baseline", "--outcomes"):
        p.add_argument(flag, default=None)
    p.add_argument("--analysis", default=None,
                   help="interpret output directory (or its curves.json)")
    p.add_argument("--spec", default=None,
                   help="spec.json whose units and reference ranges "
                        "annotate the statistics payload")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--token", default=None,
                   help="bearer token (falls back to AICARE_TOKEN)")
    p.add_argument("--anonymize-dates", action="store_true")
    p.add_argument("--hide-outcomes", action="store_true")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AiCareError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 6


if __name__ == "__main__":
    sys.exit(main())
