"""Command-line entry point: ``uqcast <command> ...``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 data validation, 4 numeric failure,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import reports
from .analysis import REGIMES, compute_metrics, feature_dispersion, input_gradients, label_regimes
from .data import (BUCKET, DataError, Series, aggregate_5min, load_csv, load_profile, make_windows,
                   prepare, rank_stations, similarity_report, split_chronological, synth_generate)
from .model import CheckpointError, ModelConfig, build_model, load_model, save_model
from .numerics import NonFiniteError, RngStream
from .training import TrainConfig, TrainingDivergedError, train
from .transfer import TransferSpec, evaluate_transfer
from .uncertainty import decompose, mc_sample, summarize_uncertainty

log = logging.getLogger("uqcast")

EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Flat training run description; unknown keys are rejected."""

    # model
    lstm_units: list = field(default_factory=lambda: [20, 20, 10])
    dense_units: list = field(default_factory=lambda: [10, 10, 6, 2])
    dropout_rate: float = 0.02
    norm_mode: str = "none"
    leaky_alpha: float = 0.3
    lookback: int = 12
    horizon: int = 1
    seed: int = 0
    ln_eps: float = 1e-5
    recurrent_mask: str = "per_step"
    sn_train_iters: int = 1
    sn_eval_iters: int = 20
    # training
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.10
    rho: float = 0.95
    eps: float = 1e-7
    val_mode: str = "deterministic"
    T_mc: int = 50
    # paths (command-line flags take precedence)
    data: str | None = None
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           rho=self.rho, eps=self.eps, val_mode=self.val_mode)


def _read_series(path) -> Series:
    s = load_csv(path)
    if s.unsorted_rows:
        log.warning("%s: %d rows out of order; sorted", path, s.unsorted_rows)
    if len(s) > 1 and int(np.median(np.diff(s.timestamps))) < BUCKET:
        s = aggregate_5min(s)
    return s


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    if args.days < 1:
        raise UsageError("--days must be >= 1")
    try:
        prof = load_profile(args.profile)
    except (ValueError, TypeError) as exc:
        raise DataError(f"bad profile: {exc}") from exc
    series = synth_generate(prof, args.days, args.seed, start=args.start, station_id=args.station)
    series.to_csv(args.out)
    return 0


def cmd_train(args) -> int:
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config}: invalid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(raw)
    cfg.data = args.data or cfg.data
    cfg.out = args.out or cfg.out
    if not cfg.data or not cfg.out:
        raise UsageError("train needs --data and --out (or 'data'/'out' in the config)")
    try:
        mcfg, tcfg = cfg.model_config(), cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    prep = prepare(_read_series(cfg.data), mcfg.lookback, mcfg.horizon)
    model = build_model(mcfg)
    model.scaler = prep.scaler
    best, report = train(model, prep.dataset, tcfg, RngStream(mcfg.seed + 1))
    best.scaler = prep.scaler
    out = _outdir(cfg.out)
    save_model(best, out / "model.json")
    report.to_csv(out / "train_log.csv")
    _write_json(out / "resolved_config.json", asdict(cfg))
    print(f"best epoch {report.best_epoch}; wrote {out / 'model.json'}")
    return 0


def _span_mask(ts: np.ndarray, start_hours: float, span_hours: float) -> np.ndarray:
    t0 = ts.min() + start_hours * 3600
    m = (ts >= t0) & (ts < t0 + span_hours * 3600)
    if m.sum() < 2:
        raise DataError("selected chart span contains fewer than two samples")
    return m


def cmd_uq(args) -> int:
    if args.passes < 2:
        raise UsageError("--passes must be >= 2: epistemic variance needs at least two MC passes")
    model = load_model(args.model)
    cfg = model.config
    if model.scaler is None:
        raise DataError("checkpoint carries no scaler")
    ds = split_chronological(make_windows(_read_series(args.data), cfg.lookback, cfg.horizon))
    m = ds.mask("test")
    if m.sum() < 2:
        raise DataError("fewer than two test windows")
    X = model.scaler.transform(ds.X[m])
    ts = ds.target_timestamps[m]
    y = ds.y[m]
    seed = cfg.seed if args.seed is None else args.seed
    est = decompose(mc_sample(model, X, args.passes, RngStream(seed + 2))).unscaled(model.scaler)
    out = _outdir(args.out)
    reports.write_uncertainty_csv(out / "uncertainty.csv", ts, y, est)
    reports.write_metrics_csv(out / "metrics.csv", [("test", compute_metrics(y, est.mean))])
    regimes = label_regimes(ts, args.utc_offset)
    rows = []
    for comp, std in (("epistemic", est.epistemic_std), ("aleatoric", est.aleatoric_std),
                      ("total", est.total_std)):
        for group, box in summarize_uncertainty(std).items():
            rows.append((comp, group, box))
        present = [r for r in REGIMES if (regimes == r).any()]
        for group, box in summarize_uncertainty(std, regimes, present).items():
            rows.append((comp, group, box))
    reports.write_box_csv(out / "box_summary.csv", rows)
    sm = _span_mask(ts, args.span_start, args.span_hours)
    svg = reports.band_svg(ts[sm], y[sm], est.mean[sm], est.lower95[sm], est.upper95[sm],
                           title=f"mean and 95% band ({args.span_hours:g} h)")
    reports.write_text(out / "band.svg", svg)
    _write_json(out / "resolved_config.json", {
        "command": "uq", "model": str(args.model), "data": str(args.data), "passes": args.passes,
        "seed": seed, "span_start": args.span_start, "span_hours": args.span_hours,
        "utc_offset": args.utc_offset, "model_config": asdict(cfg)})
    print(f"{len(ts)} test windows; wrote {out}")
    return 0


def cmd_transfer(args) -> int:
    model = load_model(args.model)
    target = _read_series(args.target)
    tspec = TransferSpec(fraction=args.fraction, epochs=args.epochs, batch_size=args.batch_size)
    seed = model.config.seed if args.seed is None else args.seed
    rows = []
    for retrain in ([False, True] if args.retrain else [False]):
        res = evaluate_transfer(model, target, retrain, tspec, args.passes, RngStream(seed + 3),
                                eval_on="test")
        rows.append(res)
    out = _outdir(args.out)
    name = args.dataset or target.station_id or Path(args.target).stem
    with open(out / "transfer.csv", "w") as fh:
        fh.write("dataset,metric,tl,norm_mode,value\n")
        for res in rows:
            for metric in ("rmse", "mape", "r2"):
                fh.write(f"{name},{metric},{res.label},{model.config.norm_mode},"
                         f"{getattr(res.metrics, metric)!r}\n")
    for res in rows:
        if res.report is not None:
            res.report.to_csv(out / "retrain_log.csv")
    _write_json(out / "resolved_config.json", {
        "command": "transfer", "model": str(args.model), "target": str(args.target),
        "retrain": args.retrain, "seed": seed, "passes": args.passes, "transfer": asdict(tspec)})
    print(f"wrote {out / 'transfer.csv'}")
    return 0


def cmd_similarity(args) -> int:
    train_series = _read_series(args.train)
    found = []
    for path in args.candidates:
        s = _read_series(path)
        s.station_id = Path(path).stem
        found.append(s)
    out = _outdir(args.out)
    reps = [similarity_report(train_series, s, args.days, args.bins) for s in found]
    for r in reps:
        r.to_csv(out / f"similarity_{r.station_id}.csv")
    ranked = rank_stations(reps)
    with open(out / "ranking.csv", "w") as fh:
        fh.write("rank,station,median_kl,median_correlation\n")
        for i, r in enumerate(ranked, start=1):
            fh.write(f"{i},{r.station_id},{r.median_kl!r},{r.median_correlation!r}\n")
    _write_json(out / "summary.json", {"days": args.days, "bins": args.bins,
                                       "training": str(args.train),
                                       "stations": [r.summary() for r in ranked]})
    for i, r in enumerate(ranked, start=1):
        print(f"{i}. {r.station_id} median_kl={r.median_kl:.4f} median_corr={r.median_correlation:.4f}")
    return 0


def cmd_analyze(args) -> int:
    model = load_model(args.model)
    cfg = model.config
    if model.scaler is None:
        raise DataError("checkpoint carries no scaler")
    ds = split_chronological(make_windows(_read_series(args.data), cfg.lookback, cfg.horizon))
    m = ds.mask(args.split)
    X = model.scaler.transform(ds.X[m])
    ts = ds.target_timestamps[m]
    out = _outdir(args.out)
    sal = input_gradients(model, X, ts)
    reports.write_saliency_csv(out / "saliency.csv", ts, sal, normalized=True)
    reports.write_saliency_csv(out / "saliency_raw.csv", ts, sal, normalized=False)
    labels = label_regimes(ts, args.utc_offset)
    present = [r for r in REGIMES if (labels == r).sum() >= 2]
    reports.write_dispersion_csv(out / "dispersion.csv", feature_dispersion(model, X, labels, present))
    _write_json(out / "resolved_config.json", {
        "command": "analyze", "model": str(args.model), "data": str(args.data), "split": args.split,
        "utc_offset": args.utc_offset, "model_config": asdict(cfg)})
    print(f"wrote {out}")
    return 0


def cmd_verify(args) -> int:
    from .verification import run_all

    try:
        checks = run_all(args.fast, args.corrupt)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from exc
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    if failed:
        print("verification failed: " + ", ".join(f"{c.suite}:{c.rule}" for c in failed), file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(checks)} checks passed")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uqcast", description="LSTM traffic forecasting with uncertainty estimates.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic 5-minute flow CSV")
    s.add_argument("--profile", default="weekday", help="bundled profile name or JSON file")
    s.add_argument("--days", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--start", type=int, default=0, help="first timestamp (epoch seconds)")
    s.add_argument("--station", default="synthetic")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("uq", help="MC-dropout uncertainty on the test split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--passes", type=int, default=50)
    s.add_argument("--seed", type=int)
    s.add_argument("--span-start", type=float, default=0.0, help="chart start, hours into the test split")
    s.add_argument("--span-hours", type=float, default=48.0)
    s.add_argument("--utc-offset", type=float, default=0.0, help="hours added before regime labelling")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_uq)

    s = sub.add_parser("transfer", help="evaluate on a target station, optionally retraining the head")
    s.add_argument("--model", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--retrain", action="store_true")
    s.add_argument("--fraction", type=float, default=0.2)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--passes", type=int, default=50)
    s.add_argument("--seed", type=int)
    s.add_argument("--dataset", help="label for the dataset column")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("similarity", help="rank candidate stations by median daily KL")
    s.add_argument("--train", required=True)
    s.add_argument("--candidates", nargs="+", required=True)
    s.add_argument("--days", type=int, default=30)
    s.add_argument("--bins", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_similarity)

    s = sub.add_parser("analyze", help="input saliency and per-regime feature dispersion")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--utc-offset", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("verify", help="run the built-in invariant suites")
    s.add_argument("--fast", action="store_true")
    s.add_argument("--corrupt", metavar="RULE", help="corrupt one VJP rule (negative control)")
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
