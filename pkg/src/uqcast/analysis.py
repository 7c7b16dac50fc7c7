"""Error metrics, time-of-day regimes, input saliency and feature dispersion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import DAY
from .model import Model, build_graph, forward

REGIMES = ("low", "increasing", "high", "decreasing")
# half-open hour ranges [start, end)
REGIME_HOURS = {"low": (0, 6), "increasing": (6, 8), "high": (8, 18), "decreasing": (18, 24)}
MAPE_FLOOR = 1e-8


@dataclass
class Metrics:
    rmse: float
    mape: float
    r2: float
    n: int
    mape_excluded: int = 0


def compute_metrics(y_true, y_pred) -> Metrics:
    """RMSE, MAPE (as a ratio) and R^2.

    Targets with ``|y| < 1e-8`` are left out of MAPE and counted in
    ``mape_excluded``.
    """
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} targets, {p.size} predictions")
    if y.size < 2:
        raise ValueError("metrics need at least two samples")
    resid = y - p
    sse = float(resid @ resid)
    rmse = float(np.sqrt(sse / y.size))
    ok = np.abs(y) >= MAPE_FLOOR
    if not ok.any():
        raise ValueError("every target is ~0; MAPE undefined")
    mape = float(np.mean(np.abs(resid[ok] / y[ok])))
    centred = y - y.mean()
    sst = float(centred @ centred)
    if sst == 0:
        raise ValueError("constant targets; R^2 undefined")
    return Metrics(rmse, mape, 1.0 - sse / sst, int(y.size), int((~ok).sum()))


def hour_of_day(timestamps, utc_offset_hours: float = 0.0) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.int64) + int(round(utc_offset_hours * 3600))
    return (ts % DAY) / 3600.0


def label_regimes(timestamps, utc_offset_hours: float = 0.0) -> np.ndarray:
    h = hour_of_day(timestamps, utc_offset_hours)
    labels = np.empty(h.shape, dtype="<U10")
    for name, (lo, hi) in REGIME_HOURS.items():
        labels[(h >= lo) & (h < hi)] = name
    return labels


@dataclass
class SaliencyMap:
    raw: np.ndarray  # (n, L): d mean / d input lag, oldest lag first
    normalized: np.ndarray  # per-day min-max of raw
    day: np.ndarray  # day index of each row


def input_gradients(model: Model, windows, timestamps=None) -> SaliencyMap:
    """Gradient of the deterministic predicted mean with respect to every input lag.

    Rows are independent in deterministic mode, so one backward pass over the
    summed means yields every per-window gradient.  Normalization is min-max
    over all cells belonging to the same day (of ``timestamps``; a single day
    when omitted).
    """
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    g = build_graph(model, X, "deterministic", trainable=frozenset(), input_grad=True)
    leaves = nx.backward(nx.sum_all(g.mean))
    raw = leaves.get(g.inputs, np.zeros_like(X))
    if not np.isfinite(raw).all():
        raise FloatingPointError("non-finite input gradient")
    day = (np.zeros(len(X), dtype=np.int64) if timestamps is None
           else np.asarray(timestamps, dtype=np.int64) // DAY)
    norm = np.zeros_like(raw)
    for d in np.unique(day):
        m = day == d
        lo, hi = raw[m].min(), raw[m].max()
        if hi > lo:
            norm[m] = (raw[m] - lo) / (hi - lo)
    return SaliencyMap(raw, norm, day)


@dataclass
class FeatureStats:
    variance: dict[str, float]  # summed per-dimension sample variance
    counts: dict[str, int]


def dispersion(features, labels, order=REGIMES) -> FeatureStats:
    """Per-group sum over feature dimensions of the (n-1) sample variance."""
    F = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    var, counts = {}, {}
    for r in order:
        sel = F[labels == r]
        if len(sel) < 2:
            raise ValueError(f"regime {r!r} has {len(sel)} samples; variance needs at least 2")
        var[r] = float(sel.var(axis=0, ddof=1).sum())
        counts[r] = int(len(sel))
    return FeatureStats(var, counts)


def feature_dispersion(model: Model, windows, labels, order=REGIMES) -> FeatureStats:
    feats = forward(model, windows).features
    return dispersion(feats, labels, order)
