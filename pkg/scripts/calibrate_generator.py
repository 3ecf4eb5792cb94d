"""Label-level audit of a synthetic cohort's planted shapes.

Generates a cohort, labels it, and builds an idealized importance table
where attention is 1 exactly on the High visits of each planted
feature's linked cause of death. Running the real curve classifier on
that table shows the best any trained model could read back from the
labels alone: if the planted turning point is not recoverable here, no
amount of training will find it, so tune the spec until this audit
passes before spending minutes on a training run.

Two caveats learned the hard way. Passing this audit is necessary, not
sufficient: it cannot see training-level channel competition (another
feature explaining the same deaths better). And near an L elbow it is
pessimistic: a handful of deaths above the hazard wall keeps the binary
High fraction over the elbow cut, while a trained model averages those
few against the surviving majority at the same values.

    python scripts/calibrate_generator.py --preset shape_probe --seeds 0 1 2
    python scripts/calibrate_generator.py --spec out/spec.json --patients 400
"""

import argparse
from dataclasses import replace

import numpy as np

from aicare.interpret import ImportanceRecord, classify_shape, importance_value_curve
from aicare.records import VisitLabel, label_cohort
from aicare.synthetic import (generate_synthetic, load_spec, pd_default_spec,
                              shape_probe_spec)

PRESETS = {"pd_default": pd_default_spec, "shape_probe": shape_probe_spec}


def oracle_records(cohort, labeled, feature: str, cause: str) -> list[ImportanceRecord]:
    j = list(cohort.feature_names).index(feature)
    rows = []
    for rec in cohort:
        labs = labeled.labels_for(rec.patient_id)
        for t, lab in enumerate(labs):
            v = rec.values[t, j]
            if lab is VisitLabel.UNCERTAIN or np.isnan(v):
                continue
            high = lab is VisitLabel.HIGH
            linked = high and rec.outcome.died and rec.outcome.cause == cause
            rows.append(ImportanceRecord(
                patient_id=rec.patient_id, visit_index=t + 1, feature=feature,
                value=float(v), attention=1.0 if linked else 0.0,
                risk=1.0 if high else 0.0, label="High" if high else "Low",
                outcome="died" if rec.outcome.died else "alive",
                cause=rec.outcome.cause))
    return rows


def audit(spec, seed: int) -> bool:
    cohort, truth = generate_synthetic(spec, seed)
    labeled = label_cohort(cohort)
    causes = {}
    for p in cohort:
        if p.outcome.died:
            causes[p.outcome.cause] = causes.get(p.outcome.cause, 0) + 1
    s = truth["stats"]
    cause_str = "  ".join(f"{c}:{n}" for c, n in sorted(causes.items()))
    print(f"seed {seed}: mortality {s['mortality_rate']:.3f}  "
          f"visits/patient {s['visits_per_patient']:.1f}  "
          f"labeled-positive {s['labeled_positive_rate']:.3f}  [{cause_str}]")

    all_ok = True
    for name, planted in truth["planted"].items():
        cause = planted.get("cause_link")
        if cause is None:
            continue
        curve = importance_value_curve(
            oracle_records(cohort, labeled, name, cause), name)
        shape = classify_shape(curve)
        band = 2 * curve.bin_width
        target = planted["turning_point"]
        if shape.turning_point is None:
            verdict, ok = "no turning point", False
        else:
            ok = abs(shape.turning_point - target) <= band
            verdict = (f"tp {shape.turning_point:.2f} vs {target:.2f} "
                       f"(band +/-{band:.2f}) {'ok' if ok else 'MISSED'}")
        all_ok = all_ok and ok and shape.shape == planted["role"]
        print(f"  {name:14s} want {planted['role']:8s} got {shape.shape:9s} "
              f"rec {shape.recommendation or '-':9s} "
              f"rises {shape.rise_low:.2f}/{shape.rise_high:.2f}  {verdict}")
    return all_ok


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    src = ap.add_mutually_exclusive_group()
    src.add_argument("--preset", default="shape_probe", choices=sorted(PRESETS))
    src.add_argument("--spec", help="path to a spec.json instead of a preset")
    ap.add_argument("--patients", type=int, default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()

    if args.spec:
        spec = load_spec(args.spec)
        if args.patients:
            spec = replace(spec, num_patients=args.patients)
    else:
        spec = PRESETS[args.preset](args.patients) if args.patients \
            else PRESETS[args.preset]()

    results = [audit(spec, seed) for seed in args.seeds]
    print("all seeds recovered" if all(results) else "some seeds missed")
    raise SystemExit(0 if all(results) else 1)


if __name__ == "__main__":
    main()
