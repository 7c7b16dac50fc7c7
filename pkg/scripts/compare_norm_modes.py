#!/usr/bin/env python3
"""Train the regular, layer-normalized and spectral-normalized variants side by side.

    python3 scripts/compare_norm_modes.py --out compare/ [--epochs 60] [--days 6]

Writes table1.csv (test metrics in vehicle counts plus mean uncertainty) and
table3.csv (summed penultimate-feature variance per traffic regime), both on
the bundled weekday profile.
"""

import argparse
import sys
from pathlib import Path

from uqcast.analysis import REGIMES
from uqcast.benchmarks import ComparisonSetup, compare_norm_modes
from uqcast.model import save_model

LABELS = {"none": "regular", "layer": "layer_norm", "spectral": "spectral_norm"}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=ComparisonSetup.epochs)
    ap.add_argument("--days", type=int, default=ComparisonSetup.days)
    ap.add_argument("--seed", type=int, default=ComparisonSetup.seed)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = compare_norm_modes(ComparisonSetup(days=args.days, epochs=args.epochs, seed=args.seed))
    with open(out / "table1.csv", "w") as fh:
        fh.write("model,rmse,mape,r2,mean_epistemic_std,mean_aleatoric_std\n")
        for r in results:
            m = r.metrics
            fh.write(f"{LABELS[r.norm_mode]},{m.rmse!r},{m.mape!r},{m.r2!r},"
                     f"{r.mean_epistemic_std!r},{r.mean_aleatoric_std!r}\n")
    with open(out / "table3.csv", "w") as fh:
        fh.write("model," + ",".join(REGIMES) + "\n")
        for r in results:
            fh.write(LABELS[r.norm_mode] + "," + ",".join(repr(r.dispersion[k]) for k in REGIMES) + "\n")
    for r in results:
        save_model(r.model, out / f"{r.norm_mode}.json")
        print(f"{LABELS[r.norm_mode]:>14}  rmse {r.metrics.rmse:8.3f}  r2 {r.metrics.r2:.4f}  "
              f"epistemic {r.mean_epistemic_std:.3f}  aleatoric {r.mean_aleatoric_std:.3f}  "
              f"({r.seconds:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
