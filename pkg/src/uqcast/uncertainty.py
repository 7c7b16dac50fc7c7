"""Monte-Carlo dropout ensembles and the epistemic / aleatoric split."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import Model, forward
from .numerics import RngStream
from .training import S_CLAMP

Z95 = 1.96
NEG_TOL = 1e-12


@dataclass
class McEnsemble:
    means: np.ndarray  # (T, n) predicted means, scaled units
    log_vars: np.ndarray  # (T, n)

    @property
    def passes(self) -> int:
        return self.means.shape[0]


@dataclass
class UncertaintyEstimate:
    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    total_var: np.ndarray
    lower95: np.ndarray
    upper95: np.ndarray

    def __len__(self):
        return len(self.mean)

    @property
    def epistemic_std(self):
        return np.sqrt(self.epistemic_var)

    @property
    def aleatoric_std(self):
        return np.sqrt(self.aleatoric_var)

    @property
    def total_std(self):
        return np.sqrt(self.total_var)

    def unscaled(self, scaler) -> "UncertaintyEstimate":
        """Vehicle-count units: means are inverted, variances scale by range squared."""
        r2 = scaler.range ** 2
        epi = self.epistemic_var * r2
        ale = self.aleatoric_var * r2
        return _assemble(scaler.inverse(self.mean), epi, ale)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("UQCAST_THREADS", "1")))
    except ValueError:
        return 1


def mc_sample(model: Model, windows, T: int = 50, rng: RngStream | None = None,
              threads: int | None = None) -> McEnsemble:
    """``T`` stochastic forward passes with independent dropout masks.

    Pass ``t`` draws from the ``t``-th child of ``rng``, so results do not
    depend on the number of worker threads.
    """
    if T < 1:
        raise ValueError("mc_sample needs at least one pass")
    rng = rng if rng is not None else RngStream(model.config.seed)
    streams = rng.spawn(T)
    threads = threads or _thread_count()

    def one(stream):
        out = forward(model, windows, "mc", stream)
        return out.mean, out.log_var

    if threads > 1 and T > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, streams))
    else:
        results = [one(s) for s in streams]
    return McEnsemble(np.stack([r[0] for r in results]), np.stack([r[1] for r in results]))


def _assemble(mean, epistemic, aleatoric) -> UncertaintyEstimate:
    total = epistemic + aleatoric
    half = Z95 * np.sqrt(total)
    return UncertaintyEstimate(mean, epistemic, aleatoric, total, mean - half, mean + half)


def decompose(ens: McEnsemble, s_clamp=S_CLAMP) -> UncertaintyEstimate:
    """Population-form (divide-by-T) split of predictive variance.

    epistemic = mean(y_hat^2) - mean(y_hat)^2, evaluated on values shifted by
    the first pass (variance is shift invariant; identical passes give exactly
    zero).  aleatoric = mean(exp(s)) over passes, averaged in variance space.
    """
    if ens.passes < 2:
        raise ValueError("epistemic variance needs at least two MC passes")
    if not (np.isfinite(ens.means).all() and np.isfinite(ens.log_vars).all()):
        raise FloatingPointError("non-finite values in MC ensemble")
    T = ens.passes
    d = ens.means - ens.means[0]
    m1 = d.sum(axis=0) / T
    epi = (d * d).sum(axis=0) / T - m1 * m1
    if np.any(epi < -NEG_TOL):
        raise FloatingPointError(f"negative epistemic variance {epi.min():.3e}")
    epi = np.maximum(epi, 0.0)
    mean = ens.means[0] + m1
    ale = np.exp(np.clip(ens.log_vars, *s_clamp)).sum(axis=0) / T
    return _assemble(mean, epi, ale)


@dataclass
class BoxSummary:
    n: int
    median: float
    q1: float
    q3: float
    iqr: float
    whisker_low: float
    whisker_high: float
    n_fliers: int


def box_stats(values) -> BoxSummary:
    """Box-plot statistics with linearly interpolated quartiles.

    Whiskers reach the most extreme observations within 1.5 IQR of the box.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("box statistics of an empty group")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return BoxSummary(int(v.size), float(med), float(q1), float(q3), float(iqr),
                      float(inside.min()), float(inside.max()), int(v.size - inside.size))


def summarize_uncertainty(std_values, groups=None, order=None) -> dict[str, BoxSummary]:
    """Box statistics overall (key ``"all"``) or per group label.

    With ``order`` every listed group must be non-empty.
    """
    v = np.asarray(std_values, dtype=np.float64)
    if groups is None:
        return {"all": box_stats(v)}
    groups = np.asarray(groups)
    labels = list(order) if order is not None else sorted(set(groups.tolist()))
    out = {}
    for g in labels:
        sel = v[groups == g]
        if sel.size == 0:
            raise ValueError(f"no samples in group {g!r}")
        out[g] = box_stats(sel)
    return out
