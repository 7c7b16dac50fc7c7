"""Transfer learning: freeze the LSTM stack, retrain the dense head on target data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import Metrics, compute_metrics
from .data import DataError, Scaler, Series, make_windows, split_sizes
from .model import Model
from .numerics import RngStream
from .training import TrainConfig, TrainReport, train
from .uncertainty import UncertaintyEstimate, decompose, mc_sample


@dataclass
class TransferSpec:
    fraction: float = 0.20
    epochs: int = 100
    batch_size: int = 64
    val_fraction: float = 0.20  # tail of the retrain slice used for model selection
    train_dense_norm: bool = True  # dense-side layer-norm gain/shift are retrained
    train_lstm_norm: bool = False

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"transfer fraction must lie in (0, 1], got {self.fraction}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


def trainable_names(model: Model, tspec: TransferSpec) -> frozenset[str]:
    names = set()
    for name in model.params:
        layer, _, leaf = name.partition(".")
        is_norm = leaf.startswith("ln_")
        if layer.startswith("dense"):
            if not is_norm or tspec.train_dense_norm:
                names.add(name)
        elif is_norm and tspec.train_lstm_norm:
            names.add(name)
    return frozenset(names)


@dataclass
class TargetWindows:
    """Scaled target windows with the chronological retrain/eval partition."""

    X: np.ndarray
    y: np.ndarray
    timestamps: np.ndarray
    retrain: np.ndarray  # bool, leading ``fraction`` of windows
    test: np.ndarray  # bool, trailing 25% (same rule as the source split)


def target_windows(model: Model, target: Series, fraction: float = 0.20,
                   scaler: Scaler | None = None) -> TargetWindows:
    scaler = scaler or model.scaler
    if scaler is None:
        raise ValueError("model carries no scaler; pass the source-domain scaler explicitly")
    ds = make_windows(target, model.config.lookback, model.config.horizon)
    n = len(ds)
    if n < 10:
        raise DataError(f"target series yields only {n} windows")
    n_re = int(np.floor(fraction * n + 1e-9))
    retrain = np.zeros(n, dtype=bool)
    retrain[:n_re] = True
    n_tr, n_va, _ = split_sizes(n)
    test = np.zeros(n, dtype=bool)
    test[n_tr + n_va:] = True
    return TargetWindows(scaler.transform(ds.X), scaler.transform(ds.y), ds.target_timestamps,
                         retrain, test)


def transfer_retrain(model: Model, target: Series, tspec: TransferSpec | None = None,
                     rng: RngStream | None = None, scaler: Scaler | None = None
                     ) -> tuple[Model, TrainReport]:
    """Retrain the dense head on the chronologically first ``tspec.fraction`` of ``target``.

    A fresh Adadelta state is used.  The input model is not modified.
    """
    from .data import WindowedDataset

    tspec = tspec or TransferSpec()
    tw = target_windows(model, target, tspec.fraction, scaler)
    names = trainable_names(model, tspec)
    if not names:
        raise ValueError("no trainable parameters selected for transfer")
    work = model.copy()
    if tspec.epochs == 0:
        return work, TrainReport()
    idx = np.flatnonzero(tw.retrain)
    n_val = int(np.floor(tspec.val_fraction * len(idx)))
    if len(idx) - n_val < 1 or n_val < 1:
        raise DataError(f"retrain slice of {len(idx)} windows is too small")
    labels = np.array(["train"] * (len(idx) - n_val) + ["val"] * n_val)
    ds = WindowedDataset(tw.X[idx], tw.y[idx], idx, tw.timestamps[idx], model.config.lookback,
                         model.config.horizon, labels)
    rng = rng if rng is not None else RngStream(model.config.seed + 1)
    cfg = TrainConfig(epochs=tspec.epochs, batch_size=tspec.batch_size)
    return train(work, ds, cfg, rng, trainable=names)


@dataclass
class TransferResult:
    label: str  # "no" or "yes" (retrained)
    metrics: Metrics
    estimate: UncertaintyEstimate  # unscaled units
    y_true: np.ndarray
    timestamps: np.ndarray
    report: TrainReport | None = None
    eval_index: np.ndarray = field(default=None, repr=False)
    model: Model | None = field(default=None, repr=False)  # the model that was evaluated


def evaluate_transfer(model: Model, target: Series, with_retrain: bool, tspec: TransferSpec | None = None,
                      passes: int = 50, rng: RngStream | None = None, scaler: Scaler | None = None,
                      eval_on: str = "default") -> TransferResult:
    """Metrics and MC uncertainty of ``model`` on a target station.

    ``eval_on="default"`` evaluates a retrained model on every window after the
    retrain slice and an untouched model on the trailing 25% test split;
    ``"test"`` forces the trailing test split (contained in the remainder for
    fractions up to 0.75), which keeps with/without rows comparable.
    """
    if eval_on not in ("default", "test"):
        raise ValueError(f"unknown eval_on {eval_on!r}")
    tspec = tspec or TransferSpec()
    scaler = scaler or model.scaler
    rng = rng if rng is not None else RngStream(model.config.seed + 2)
    tw = target_windows(model, target, tspec.fraction, scaler)
    report = None
    if with_retrain:
        retrain_rng, rng = rng.spawn(2)
        model, report = transfer_retrain(model, target, tspec, retrain_rng, scaler)
        sel = ~tw.retrain if eval_on == "default" else tw.test & ~tw.retrain
    else:
        sel = tw.test
    idx = np.flatnonzero(sel)
    if len(idx) < 2:
        raise DataError("too few evaluation windows on the target")
    est = decompose(mc_sample(model, tw.X[idx], passes, rng)).unscaled(scaler)
    y_true = scaler.inverse(tw.y[idx])
    return TransferResult("yes" if with_retrain else "no", compute_metrics(y_true, est.mean), est,
                          y_true, tw.timestamps[idx], report, idx, model)
