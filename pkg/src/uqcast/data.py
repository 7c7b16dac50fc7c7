"""Flow series ingestion, 5-minute aggregation, scaling, windowing and station similarity."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

BUCKET = 300  # seconds
DAY = 86400
PER_DAY = DAY // BUCKET


class DataError(ValueError):
    """Input data violates a contract (bad rows, too short, constant, ...)."""


@dataclass
class Series:
    """Flow counts at strictly increasing timestamps (seconds, local wall clock)."""

    timestamps: np.ndarray
    flow: np.ndarray
    station_id: str = ""
    gaps: np.ndarray | None = None
    unsorted_rows: int = 0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.timestamps.shape != self.flow.shape:
            raise DataError("timestamps and flow differ in length")
        if self.gaps is None:
            self.gaps = np.zeros(len(self.flow), dtype=bool)
        self.gaps = np.asarray(self.gaps, dtype=bool)
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.flow)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("timestamp,flow\n")
            for t, v in zip(self.timestamps, self.flow):
                fh.write(f"{int(t)},{_fmt(v)}\n")


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def parse_timestamp(text: str) -> int:
    """Epoch seconds or ISO-8601; naive ISO times are read as wall clock (UTC)."""
    text = text.strip()
    try:
        return int(float(text))
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def load_csv(path, station_id: str | None = None) -> Series:
    """Read a ``timestamp,flow`` CSV; rows are sorted and duplicates rejected."""
    path = Path(path)
    stamps, flows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["timestamp", "flow"]:
            raise DataError(f"{path}: expected header 'timestamp,flow'")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                ts = parse_timestamp(row[0])
                fl = float(row[1])
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: unparseable row {row!r} ({exc})") from exc
            if not math.isfinite(fl):
                raise DataError(f"{path}:{lineno}: non-finite flow")
            if fl < 0:
                raise DataError(f"{path}:{lineno}: negative flow {fl}")
            stamps.append(ts)
            flows.append(fl)
    ts = np.array(stamps, dtype=np.int64)
    fl = np.array(flows, dtype=np.float64)
    unsorted = int(np.sum(np.diff(ts) < 0)) if len(ts) > 1 else 0
    if unsorted:
        log.warning("%s: %d out-of-order rows; sorting", path, unsorted)
    order = np.argsort(ts, kind="stable")
    ts, fl = ts[order], fl[order]
    dup = np.flatnonzero(np.diff(ts) == 0)
    if len(dup):
        raise DataError(f"{path}: duplicate timestamp {int(ts[dup[0]])}")
    return Series(ts, fl, station_id if station_id is not None else path.stem, unsorted_rows=unsorted)


def aggregate_5min(raw: Series, cadence: int | None = None) -> Series:
    """Sum counts into aligned 5-minute buckets.

    Buckets with fewer than ``300 / cadence`` sub-samples, and buckets absent
    from the input altogether, are kept with ``gaps`` set.
    """
    if len(raw) == 0:
        return raw
    if cadence is None:
        cadence = int(np.median(np.diff(raw.timestamps))) if len(raw) > 1 else BUCKET
    if cadence <= 0 or BUCKET % cadence:
        raise DataError(f"cadence {cadence}s does not divide {BUCKET}s")
    per_bucket = BUCKET // cadence
    bucket = (raw.timestamps // BUCKET) * BUCKET
    first, last = int(bucket[0]), int(bucket[-1])
    n = (last - first) // BUCKET + 1
    idx = (bucket - first) // BUCKET
    sums = np.bincount(idx, weights=raw.flow, minlength=n)
    counts = np.bincount(idx, minlength=n)
    bad = np.bincount(idx, weights=raw.gaps.astype(float), minlength=n) > 0
    gaps = (counts < per_bucket) | bad
    return Series(first + BUCKET * np.arange(n), sums, raw.station_id, gaps)


@dataclass
class Scaler:
    """Min-max scaling fitted on training data only; no clipping on transform."""

    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise DataError(f"scaler needs max > min (got min={self.min}, max={self.max})")

    @property
    def range(self) -> float:
        return self.max - self.min

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * (self.max - self.min) + self.min

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(float(d["min"]), float(d["max"]))


def fit_scaler(values) -> Scaler:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot fit a scaler on no data")
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise DataError("constant training series; min-max scaling undefined")
    return Scaler(lo, hi)


SPLITS = ("train", "val", "test")


@dataclass
class WindowedDataset:
    """Stride-1 windows ``X[i] = v[s_i : s_i + L]`` with target ``v[s_i + L + h - 1]``."""

    X: np.ndarray
    y: np.ndarray
    starts: np.ndarray  # index of each window's first input in the source series
    target_timestamps: np.ndarray
    lookback: int
    horizon: int
    labels: np.ndarray = None
    n_gap_dropped: int = 0

    def __post_init__(self):
        if self.labels is None:
            self.labels = np.full(len(self.y), "train", dtype="<U5")

    def __len__(self):
        return len(self.y)

    @property
    def target_index(self) -> np.ndarray:
        return self.starts + self.lookback + self.horizon - 1

    def mask(self, label: str) -> np.ndarray:
        if label not in SPLITS:
            raise ValueError(f"unknown split {label!r}")
        return self.labels == label

    def split(self, label: str) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask(label)
        return self.X[m], self.y[m]

    def subset(self, m) -> "WindowedDataset":
        return WindowedDataset(self.X[m], self.y[m], self.starts[m], self.target_timestamps[m],
                               self.lookback, self.horizon, self.labels[m].copy(), 0)

    def rescaled(self, scaler: Scaler) -> "WindowedDataset":
        return WindowedDataset(scaler.transform(self.X), scaler.transform(self.y), self.starts,
                               self.target_timestamps, self.lookback, self.horizon,
                               self.labels.copy(), self.n_gap_dropped)


def make_windows(series: Series, lookback: int, horizon: int = 1, values=None) -> WindowedDataset:
    """All stride-1 windows; windows touching a gap-flagged point are dropped."""
    v = series.flow if values is None else np.asarray(values, dtype=np.float64)
    N = len(v)
    span = lookback + horizon
    if lookback < 1 or horizon < 1:
        raise DataError("lookback and horizon must be >= 1")
    if N < span:
        raise DataError(f"series of length {N} too short for lookback {lookback} + horizon {horizon}")
    n = N - span + 1
    starts = np.arange(n)
    gap = series.gaps.astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(gap)])
    touched = (csum[starts + span] - csum[starts]) > 0
    keep = starts[~touched]
    X = v[keep[:, None] + np.arange(lookback)]
    y = v[keep + span - 1]
    return WindowedDataset(X, y, keep, series.timestamps[keep + span - 1], lookback, horizon,
                           n_gap_dropped=int(touched.sum()))


def split_sizes(n: int, fractions=(0.60, 0.15, 0.25)) -> tuple[int, int, int]:
    """Floor rule: train = floor(f0 n), val = floor(f1 n), test = the rest."""
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n_tr = int(math.floor(fractions[0] * n + 1e-9))
    n_va = int(math.floor(fractions[1] * n + 1e-9))
    return n_tr, n_va, n - n_tr - n_va


def split_chronological(ds: WindowedDataset, train: float = 0.60, val: float = 0.15,
                        test: float = 0.25) -> WindowedDataset:
    n_tr, n_va, _ = split_sizes(len(ds), (train, val, test))
    labels = np.empty(len(ds), dtype="<U5")
    labels[:n_tr] = "train"
    labels[n_tr:n_tr + n_va] = "val"
    labels[n_tr + n_va:] = "test"
    ds.labels = labels
    return ds


@dataclass
class Prepared:
    """Scaled, split windows plus the scaler fitted on the training windows."""

    dataset: WindowedDataset
    scaler: Scaler
    raw: WindowedDataset
    series: Series


def prepare(series: Series, lookback: int, horizon: int = 1, fractions=(0.60, 0.15, 0.25),
            scaler: Scaler | None = None) -> Prepared:
    """Aggregate-free pipeline: window -> split -> fit scaler on train -> scale.

    The scaler sees only values inside training windows (inputs and targets).
    """
    raw = split_chronological(make_windows(series, lookback, horizon), *fractions)
    if scaler is None:
        m = raw.mask("train")
        if not m.any():
            raise DataError("no training windows to fit the scaler on")
        scaler = fit_scaler(np.concatenate([raw.X[m].ravel(), raw.y[m]]))
    return Prepared(raw.rescaled(scaler), scaler, raw, series)


# --------------------------------------------------------------- similarity


def kl_divergence(p_samples, q_samples, bins: int = 50, eps: float = 1e-10) -> float:
    """Histogram estimate of D(P || Q) on the shared sample range."""
    p = np.asarray(p_samples, dtype=np.float64).ravel()
    q = np.asarray(q_samples, dtype=np.float64).ravel()
    if p.size == 0 or q.size == 0:
        raise DataError("kl_divergence needs non-empty samples")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    hp, _ = np.histogram(p, bins=bins, range=(lo, hi))
    hq, _ = np.histogram(q, bins=bins, range=(lo, hi))
    pp = (hp + eps) / (hp + eps).sum()
    qq = (hq + eps) / (hq + eps).sum()
    return float(np.sum(pp * np.log(pp / qq)))


@dataclass
class SimilarityReport:
    station_id: str
    days: list[int]
    kl: np.ndarray
    correlation: np.ndarray

    @property
    def median_kl(self) -> float:
        return float(np.median(self.kl))

    @property
    def median_correlation(self) -> float:
        return float(np.nanmedian(self.correlation))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("day,kl,correlation\n")
            for d, k, c in zip(self.days, self.kl, self.correlation):
                fh.write(f"{d},{float(k)!r},{float(c)!r}\n")

    def summary(self) -> dict:
        return {"station_id": self.station_id, "n_days": len(self.days),
                "median_kl": self.median_kl, "median_correlation": self.median_correlation}


def complete_days(series: Series) -> dict[int, np.ndarray]:
    """Day index (days since epoch) -> 288 flows, for days with every bucket present."""
    day = series.timestamps // DAY
    slot = (series.timestamps % DAY) // BUCKET
    out = {}
    for d in np.unique(day):
        m = (day == d) & ~series.gaps
        if m.sum() != PER_DAY:
            continue
        if not np.array_equal(np.sort(slot[m]), np.arange(PER_DAY)):
            continue
        prof = np.empty(PER_DAY)
        prof[slot[m]] = series.flow[m]
        out[int(d)] = prof
    return out


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    den = math.sqrt(float(da @ da) * float(db @ db))
    if den == 0:
        return float("nan")
    return float(np.clip((da @ db) / den, -1.0, 1.0))


def similarity_report(training: Series, candidate: Series, days: int = 30,
                      bins: int = 50) -> SimilarityReport:
    """Daily KL divergence and Pearson correlation against the training station.

    Days are paired by calendar date when both stations share ``days`` complete
    dates, otherwise by order of their complete days.
    """
    a, b = complete_days(training), complete_days(candidate)
    common = sorted(set(a) & set(b))
    if len(common) >= days:
        pairs = [(d, a[d], b[d]) for d in common[:days]]
    else:
        da, db = sorted(a), sorted(b)
        if min(len(da), len(db)) < days:
            raise DataError(f"need {days} complete days, have {len(da)} (training) and "
                            f"{len(db)} ({candidate.station_id or 'candidate'})")
        pairs = [(i, a[x], b[y]) for i, (x, y) in enumerate(zip(da[:days], db[:days]))]
    kl = np.array([kl_divergence(p, q, bins) for _, p, q in pairs])
    corr = np.array([_pearson(p, q) for _, p, q in pairs])
    return SimilarityReport(candidate.station_id, [d for d, _, _ in pairs], kl, corr)


def rank_stations(reports) -> list[SimilarityReport]:
    """Most similar first (ascending median KL; ties broken by station id)."""
    return sorted(reports, key=lambda r: (r.median_kl, r.station_id))


# ---------------------------------------------------------- synthetic traffic


@dataclass
class SynthProfile:
    """Weekday-style daily flow shape.

    The clean profile is ``base + amplitude * daily cosine`` plus two Gaussian
    peak bumps, normalized to ``[0, 1]`` over a day, raised to ``1 + skew`` and
    scaled to ``peak_flow``.  Noise has standard deviation
    ``noise_sigma + noise_level * clean(t)`` in vehicles.
    """

    peak_flow: float = 400.0
    base: float = 0.35
    amplitude: float = 0.25
    morning_peak: float = 0.45
    morning_hour: float = 7.5
    morning_width: float = 1.0
    evening_peak: float = 0.35
    evening_hour: float = 17.5
    evening_width: float = 1.5
    skew: float = 0.0
    shift_hours: float = 0.0
    noise_sigma: float = 0.0
    noise_level: float = 0.0
    integer: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "SynthProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown profile keys: {sorted(unknown)}")
        prof = cls(**d)
        prof.validate()
        return prof

    def validate(self) -> None:
        if self.peak_flow <= 0:
            raise ValueError("peak_flow must be positive")
        if self.skew <= -1:
            raise ValueError("skew must exceed -1")
        if self.noise_sigma < 0 or self.noise_level < 0:
            raise ValueError("noise parameters must be non-negative")
        if self.morning_width <= 0 or self.evening_width <= 0:
            raise ValueError("peak widths must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def _raw(self, hours: np.ndarray) -> np.ndarray:
        h = np.mod(hours - self.shift_hours, 24.0)
        g = self.base - self.amplitude * np.cos(2 * np.pi * h / 24.0)
        for height, centre, width in ((self.morning_peak, self.morning_hour, self.morning_width),
                                      (self.evening_peak, self.evening_hour, self.evening_width)):
            d = np.minimum(np.abs(h - centre), 24.0 - np.abs(h - centre))
            g = g + height * np.exp(-0.5 * (d / width) ** 2)
        return g

    def shape(self, hours: np.ndarray) -> np.ndarray:
        """Clean profile in [0, 1] at fractional hours of day."""
        ref = self._raw(np.arange(PER_DAY) / 12.0)
        lo, hi = ref.min(), ref.max()
        z = np.clip((self._raw(hours) - lo) / (hi - lo), 0.0, None)
        return z ** (1.0 + self.skew)

    def clean(self, hours) -> np.ndarray:
        return self.peak_flow * self.shape(np.asarray(hours, dtype=np.float64))

    def noise_std(self, hours) -> np.ndarray:
        return self.noise_sigma + self.noise_level * self.clean(hours)


def synth_generate(profile: SynthProfile, days: int, seed: int, start: int = 0,
                   station_id: str = "synthetic") -> Series:
    """Deterministic synthetic 5-minute flow counts (non-negative)."""
    profile.validate()
    if days < 1:
        raise ValueError("days must be >= 1")
    n = days * PER_DAY
    ts = start + BUCKET * np.arange(n, dtype=np.int64)
    hours = ((ts % DAY) / 3600.0).astype(np.float64)
    rng = np.random.Generator(np.random.PCG64(seed))
    flow = profile.clean(hours) + profile.noise_std(hours) * rng.standard_normal(n)
    flow = np.clip(flow, 0.0, None)
    if profile.integer:
        flow = np.round(flow)
    return Series(ts, flow, station_id)


def load_profile(source) -> SynthProfile:
    """Profile from a bundled name, a JSON file path, or a dict."""
    from .benchmarks import PROFILES

    if isinstance(source, SynthProfile):
        return source
    if isinstance(source, dict):
        return SynthProfile.from_dict(source)
    if source in PROFILES:
        return SynthProfile.from_dict(PROFILES[source])
    try:
        doc = json.loads(Path(source).read_text())
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ValueError(f"profile {source}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"profile {source}: expected a JSON object")
    return SynthProfile.from_dict(doc)
