#!/usr/bin/env python3
"""Run the synthetic training benchmarks and write their numbers to a directory.

    python3 scripts/run_benchmarks.py --out bench/ [--only convergence calibration ...]

Writes one JSON summary per benchmark plus the per-epoch loss logs.  The
runs are the same ones the slow acceptance tests execute.
"""

import argparse
import json
import sys
from pathlib import Path

from uqcast import benchmarks

NAMES = ("convergence", "calibration", "overfitting", "transfer")


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=float) + "\n")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--only", nargs="+", choices=NAMES, default=list(NAMES))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if "convergence" in args.only:
        run = benchmarks.convergence_run()
        run.report.to_csv(out / "convergence_log.csv")
        _dump(out / "convergence.json", {"epochs": run.epochs_run, "seconds": run.seconds,
                                         "final_rmse": run.metrics["final_rmse"],
                                         "rmse_trace": {str(k): v for k, v in run.metrics["rmse_trace"].items()}})
        print(f"convergence: scaled RMSE {run.metrics['final_rmse']:.4f} after {run.epochs_run} epochs")

    if "calibration" in args.only:
        run = benchmarks.calibration_run()
        run.report.to_csv(out / "calibration_log.csv")
        _dump(out / "calibration.json", dict(run.metrics, seconds=run.seconds))
        print(f"calibration: corr {run.metrics['correlation']:.3f} coverage {run.metrics['coverage']:.3f}")

    if "overfitting" in args.only:
        summary = {}
        for mode in ("none", "spectral"):
            run = benchmarks.overfit_run(mode)
            run.report.to_csv(out / f"overfit_{mode}_log.csv")
            summary[mode] = dict(run.metrics, seconds=run.seconds)
            print(f"overfitting/{mode}: min epoch {run.metrics['min_epoch']} "
                  f"min {run.metrics['min_val']:.3f} final {run.metrics['final_val']:.3f}")
        _dump(out / "overfitting.json", summary)

    if "transfer" in args.only:
        source, rep = benchmarks.source_model()
        rep.to_csv(out / "transfer_source_log.csv")
        plain, retrained = benchmarks.transfer_pair(source)
        _dump(out / "transfer.json", {r.label: vars(r.metrics) for r in (plain, retrained)})
        print(f"transfer: RMSE without retrain {plain.metrics.rmse:.2f}, with {retrained.metrics.rmse:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
