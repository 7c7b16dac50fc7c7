#!/usr/bin/env python3
"""Collect ``uq`` metrics into one comparison table.

    python3 scripts/table1.py regular=runs/none/uq layer=runs/layer/uq spectral=runs/sn/uq \
        --out table1.csv

Each argument is ``label=<uq output dir>``; the row labelled ``test`` of that
directory's metrics.csv becomes one table row (model, rmse, mape, r2, n).
"""

import argparse
import csv
import sys
from pathlib import Path


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("runs", nargs="+", metavar="LABEL=DIR")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    rows = []
    for item in args.runs:
        label, sep, path = item.partition("=")
        if not sep:
            ap.error(f"expected LABEL=DIR, got {item!r}")
        with open(Path(path) / "metrics.csv", newline="") as fh:
            found = [r for r in csv.DictReader(fh) if r["label"] == "test"]
        if not found:
            print(f"{path}: no test row in metrics.csv", file=sys.stderr)
            return 3
        r = found[0]
        rows.append((label, r["rmse"], r["mape"], r["r2"], r["n"]))
    with open(args.out, "w") as fh:
        fh.write("model,rmse,mape,r2,n\n")
        for row in rows:
            fh.write(",".join(row) + "\n")
    for row in rows:
        print(f"{row[0]:>10}  rmse {float(row[1]):9.4f}  mape {float(row[2]):.4f}  r2 {float(row[3]):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
