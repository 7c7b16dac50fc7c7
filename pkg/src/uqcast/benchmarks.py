"""Bundled synthetic profiles and the small experiments built on them.

The experiment helpers return plain dataclasses so the acceptance suite and
the scripts in ``scripts/`` share one definition of every benchmark run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import compute_metrics, hour_of_day
from .data import Series, SynthProfile, prepare, synth_generate
from .model import Model, ModelConfig, build_model, forward
from .numerics import RngStream
from .training import TrainConfig, TrainReport, train
from .uncertainty import decompose, mc_sample

PROFILES: dict[str, dict] = {
    # double-peak weekday with count noise
    "weekday": {"noise_sigma": 4.0, "noise_level": 0.05},
    # smooth daily cycle, no noise, no rounding
    "sinusoid": {"base": 0.5, "amplitude": 0.5, "morning_peak": 0.0, "evening_peak": 0.0,
                 "integer": False},
    # noise std grows with flow: sigma(t) = 1 + 0.1 * clean(t)
    "hetero": {"noise_sigma": 1.0, "noise_level": 0.1, "integer": False},
    "noisy": {"noise_sigma": 20.0, "noise_level": 0.15},
    "shifted": {"noise_sigma": 4.0, "noise_level": 0.05, "shift_hours": 3.0},
    "skewed": {"skew": 4.0, "noise_sigma": 2.0, "noise_level": 0.05},
    # stations of increasing distortion relative to "weekday"
    "station_a": {"noise_sigma": 4.0, "noise_level": 0.05, "skew": 0.15},
    "station_b": {"noise_sigma": 4.0, "noise_level": 0.05, "skew": 0.6},
    "station_c": {"noise_sigma": 4.0, "noise_level": 0.05, "skew": 1.5},
}
STATIONS = ("station_a", "station_b", "station_c")


def profile(name: str) -> SynthProfile:
    return SynthProfile.from_dict(PROFILES[name])


def series(name: str, days: int, seed: int = 0) -> Series:
    return synth_generate(profile(name), days, seed, station_id=name)


@dataclass
class RunResult:
    model: Model
    report: TrainReport
    epochs_run: int
    seconds: float
    metrics: dict = field(default_factory=dict)


# ------------------------------------------------------------ convergence


@dataclass
class ConvergenceSetup:
    days: int = 4
    lstm_units: tuple = (8,)
    dense_units: tuple = (8, 2)
    lookback: int = 12
    dropout_rate: float = 0.02
    max_epochs: int = 500
    batch_size: int = 16
    target_rmse: float = 0.02
    check_every: int = 10
    seed: int = 1


def convergence_run(setup: ConvergenceSetup | None = None) -> RunResult:
    """Regular model on the noiseless sinusoid until scaled test RMSE < target.

    RMSE is measured on the deterministic forward of the current weights every
    ``check_every`` epochs.
    """
    s = setup or ConvergenceSetup()
    prep = prepare(series("sinusoid", s.days), s.lookback)
    cfg = ModelConfig(lstm_units=list(s.lstm_units), dense_units=list(s.dense_units),
                      dropout_rate=s.dropout_rate, lookback=s.lookback, seed=s.seed)
    model = build_model(cfg)
    X, y = prep.dataset.split("test")
    trace = {}

    def probe(epoch, _tr, _va):
        if epoch % s.check_every:
            return False
        rmse = float(np.sqrt(np.mean((forward(model, X).mean - y) ** 2)))
        trace[epoch] = rmse
        return rmse < s.target_rmse

    t0 = time.perf_counter()
    _, rep = train(model, prep.dataset, TrainConfig(epochs=s.max_epochs, batch_size=s.batch_size),
                   RngStream(s.seed + 1), on_epoch=probe)
    last = max(trace) if trace else 0
    return RunResult(model, rep, len(rep.val_loss), time.perf_counter() - t0,
                     {"rmse_trace": trace, "final_rmse": trace.get(last, np.inf)})


# ------------------------------------------------------------ calibration


@dataclass
class CalibrationSetup:
    days: int = 6
    lstm_units: tuple = (10,)
    dense_units: tuple = (10, 6, 2)
    lookback: int = 12
    dropout_rate: float = 0.0
    epochs: int = 150
    batch_size: int = 32
    passes: int = 30
    seed: int = 1


def calibration_run(setup: CalibrationSetup | None = None) -> RunResult:
    """Train on the ``hetero`` profile and compare learned with true noise std."""
    s = setup or CalibrationSetup()
    prof = profile("hetero")
    prep = prepare(synth_generate(prof, s.days, 3), s.lookback)
    cfg = ModelConfig(lstm_units=list(s.lstm_units), dense_units=list(s.dense_units),
                      dropout_rate=s.dropout_rate, lookback=s.lookback, seed=s.seed)
    t0 = time.perf_counter()
    best, rep = train(build_model(cfg), prep.dataset,
                      TrainConfig(epochs=s.epochs, batch_size=s.batch_size), RngStream(s.seed + 1))
    X, y = prep.dataset.split("test")
    ts = prep.dataset.target_timestamps[prep.dataset.mask("test")]
    true_std = prof.noise_std(hour_of_day(ts)) / prep.scaler.range
    est = decompose(mc_sample(best, X, s.passes, RngStream(s.seed + 2)))
    inside = (y >= est.lower95) & (y <= est.upper95)
    return RunResult(best, rep, len(rep.val_loss), time.perf_counter() - t0, {
        "correlation": float(np.corrcoef(est.aleatoric_std, true_std)[0, 1]),
        "coverage": float(inside.mean()),
        "rmse": float(np.sqrt(np.mean((est.mean - y) ** 2))),
        "mean_epistemic_std": float(est.epistemic_std.mean()),
    })


# ------------------------------------------------------------ overfitting


@dataclass
class OverfitSetup:
    """One day of heavily noisy data against a wide network, stepped hard.

    Plain Adadelta step size (lr 1.0) and batches of 4 let the regular model
    memorize its ~165 training windows within the epoch budget.
    """

    days: int = 1
    lstm_units: tuple = (64,)
    dense_units: tuple = (128, 64, 6, 2)
    lookback: int = 12
    dropout_rate: float = 0.02
    epochs: int = 300
    batch_size: int = 4
    lr: float = 1.0
    seed: int = 1


def overfit_run(norm_mode: str, setup: OverfitSetup | None = None) -> RunResult:
    """Validation-loss trajectory on the ``noisy`` profile for one norm mode."""
    s = setup or OverfitSetup()
    prep = prepare(series("noisy", s.days, seed=5), s.lookback)
    cfg = ModelConfig(lstm_units=list(s.lstm_units), dense_units=list(s.dense_units),
                      dropout_rate=s.dropout_rate, lookback=s.lookback, seed=s.seed,
                      norm_mode=norm_mode)
    t0 = time.perf_counter()
    best, rep = train(build_model(cfg), prep.dataset,
                      TrainConfig(epochs=s.epochs, batch_size=s.batch_size, lr=s.lr), RngStream(s.seed + 1))
    val = np.asarray(rep.val_loss)
    return RunResult(best, rep, len(val), time.perf_counter() - t0, {
        "min_epoch": int(np.argmin(val)) + 1,
        "min_val": float(val.min()),
        "final_val": float(val[-1]),
    })


# ------------------------------------------------------------ transfer


@dataclass
class TransferSetup:
    days: int = 5
    target_days: int = 10
    lstm_units: tuple = (10,)
    dense_units: tuple = (10, 6, 2)
    lookback: int = 12
    dropout_rate: float = 0.02
    epochs: int = 60
    retrain_epochs: int = 60
    batch_size: int = 32
    passes: int = 10
    seed: int = 1


def source_model(setup: TransferSetup | None = None) -> tuple[Model, TrainReport]:
    s = setup or TransferSetup()
    prep = prepare(series("weekday", s.days, seed=11), s.lookback)
    cfg = ModelConfig(lstm_units=list(s.lstm_units), dense_units=list(s.dense_units),
                      dropout_rate=s.dropout_rate, lookback=s.lookback, seed=s.seed)
    best, rep = train(build_model(cfg), prep.dataset,
                      TrainConfig(epochs=s.epochs, batch_size=s.batch_size), RngStream(s.seed + 1))
    best.scaler = prep.scaler
    return best, rep


def transfer_pair(model: Model, setup: TransferSetup | None = None):
    """No-retrain and retrain results on the peak-shifted target, same test windows."""
    from .transfer import TransferSpec, evaluate_transfer

    s = setup or TransferSetup()
    target = series("shifted", s.target_days, seed=12)
    tspec = TransferSpec(epochs=s.retrain_epochs, batch_size=s.batch_size)
    rows = []
    for retrain in (False, True):
        rows.append(evaluate_transfer(model, target, retrain, tspec, s.passes,
                                      RngStream(s.seed + 3), eval_on="test"))
    return rows


def metrics_of(model: Model, prep, passes: int = 10, seed: int = 0):
    """Unscaled test metrics of ``model`` on a prepared dataset."""
    X, y = prep.dataset.split("test")
    est = decompose(mc_sample(model, X, passes, RngStream(seed))).unscaled(prep.scaler)
    return compute_metrics(prep.scaler.inverse(y), est.mean), est


# ------------------------------------------------------------ norm-mode comparison


@dataclass
class ComparisonSetup:
    days: int = 6
    lstm_units: tuple = (10,)
    dense_units: tuple = (10, 6, 2)
    lookback: int = 12
    dropout_rate: float = 0.02
    epochs: int = 60
    batch_size: int = 32
    passes: int = 20
    seed: int = 1


@dataclass
class VariantResult:
    norm_mode: str
    model: Model
    metrics: object  # analysis.Metrics, unscaled test split
    dispersion: dict  # regime -> summed feature variance on the test split
    mean_epistemic_std: float
    mean_aleatoric_std: float
    seconds: float


def compare_norm_modes(setup: ComparisonSetup | None = None,
                       modes=("none", "layer", "spectral")) -> list[VariantResult]:
    """Train each norm variant on ``weekday`` data and report test metrics and dispersion."""
    from .analysis import feature_dispersion, label_regimes

    s = setup or ComparisonSetup()
    prep = prepare(series("weekday", s.days, seed=21), s.lookback)
    X, _ = prep.dataset.split("test")
    regimes = label_regimes(prep.dataset.target_timestamps[prep.dataset.mask("test")])
    out = []
    for mode in modes:
        cfg = ModelConfig(lstm_units=list(s.lstm_units), dense_units=list(s.dense_units),
                          dropout_rate=s.dropout_rate, lookback=s.lookback, seed=s.seed, norm_mode=mode)
        t0 = time.perf_counter()
        best, _ = train(build_model(cfg), prep.dataset,
                        TrainConfig(epochs=s.epochs, batch_size=s.batch_size), RngStream(s.seed + 1))
        best.scaler = prep.scaler
        metrics, est = metrics_of(best, prep, s.passes, s.seed + 2)
        disp = feature_dispersion(best, X, regimes).variance
        out.append(VariantResult(mode, best, metrics, disp, float(est.epistemic_std.mean()),
                                 float(est.aleatoric_std.mean()), time.perf_counter() - t0))
    return out
