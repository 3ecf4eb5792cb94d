"""End-to-end demo: generate a cohort, train, evaluate, interpret.

Runs the same CLI commands a user would, in one go, against a scratch
directory. Useful as a smoke test of the full pipeline and as a copy
source for the individual commands.

    python scripts/run_pipeline.py --workdir /tmp/aicare_demo
    python scripts/run_pipeline.py --preset shape_probe --patients 600 --folds 1
"""

import argparse
import subprocess
import sys
import time
from pathlib import Path


def run(cmd: list[str]) -> None:
    print(f"$ {' '.join(cmd)}")
    t0 = time.time()
    res = subprocess.run(cmd)
    if res.returncode != 0:
        sys.exit(res.returncode)
    print(f"  ... {time.time() - t0:.1f}s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", default="pipeline_out")
    ap.add_argument("--preset", default="separable",
                    choices=["separable", "pd_default", "shape_probe"])
    ap.add_argument("--patients", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--folds", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--batch-size", type=int, default=32)
    args = ap.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    model = work / "model"
    report = work / "report"
    aicare = [sys.executable, "-m", "aicare.cli"]
    cohort = ["--visits", str(data / "visits.csv"),
              "--baseline", str(data / "baseline.csv"),
              "--outcomes", str(data / "outcomes.csv")]

    run(aicare + ["generate", "--preset", args.preset,
                  "--patients", str(args.patients), "--seed", str(args.seed),
                  "--out", str(data)])
    run(aicare + ["train", *cohort, "--out", str(model),
                  "--folds", str(args.folds), "--epochs", str(args.epochs),
                  "--batch-size", str(args.batch_size), "--seed", str(args.seed)])
    if args.folds >= 2:
        run(aicare + ["evaluate", *cohort, "--model", str(model),
                      "--out", str(work / "metrics_recheck.json")])
    run(aicare + ["interpret", *cohort, "--model", str(model),
                  "--out", str(report)])

    print(f"\nartifacts under {work}/")
    print(f"  serve with: aicare serve --checkpoint {model}/fold_0/checkpoint.json "
          f"--visits {data}/visits.csv --baseline {data}/baseline.csv "
          f"--outcomes {data}/outcomes.csv --analysis {report}")


if __name__ == "__main__":
    main()
