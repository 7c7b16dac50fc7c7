"""CSV emitters and a dependency-free SVG band chart."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .analysis import Metrics, SaliencyMap
from .uncertainty import BoxSummary, UncertaintyEstimate


def _r(x) -> str:
    return repr(float(x))


def write_uncertainty_csv(path, timestamps, y_true, est: UncertaintyEstimate) -> None:
    with open(path, "w") as fh:
        fh.write("timestamp,y_true,mean,epistemic_std,aleatoric_std,total_std,lower95,upper95\n")
        cols = (est.mean, est.epistemic_std, est.aleatoric_std, est.total_std, est.lower95, est.upper95)
        for i, t in enumerate(timestamps):
            fh.write(",".join([str(int(t)), _r(y_true[i])] + [_r(c[i]) for c in cols]) + "\n")


def write_metrics_csv(path, rows: list[tuple[str, Metrics]]) -> None:
    with open(path, "w") as fh:
        fh.write("label,rmse,mape,r2,n,mape_excluded\n")
        for label, m in rows:
            fh.write(f"{label},{_r(m.rmse)},{_r(m.mape)},{_r(m.r2)},{m.n},{m.mape_excluded}\n")


def write_box_csv(path, rows: list[tuple[str, str, BoxSummary]]) -> None:
    with open(path, "w") as fh:
        fh.write("component,group,n,median,q1,q3,iqr,whisker_low,whisker_high,n_fliers\n")
        for comp, group, b in rows:
            fh.write(f"{comp},{group},{b.n},{_r(b.median)},{_r(b.q1)},{_r(b.q3)},{_r(b.iqr)},"
                     f"{_r(b.whisker_low)},{_r(b.whisker_high)},{b.n_fliers}\n")


def write_saliency_csv(path, timestamps, sal: SaliencyMap, normalized: bool = True) -> None:
    grid = sal.normalized if normalized else sal.raw
    L = grid.shape[1]
    with open(path, "w") as fh:
        fh.write("timestamp," + ",".join(f"lag{L - j}" for j in range(L)) + "\n")
        for t, row in zip(timestamps, grid):
            fh.write(str(int(t)) + "," + ",".join(_r(v) for v in row) + "\n")


def write_dispersion_csv(path, stats) -> None:
    with open(path, "w") as fh:
        fh.write("regime,variance,count\n")
        for r, v in stats.variance.items():
            fh.write(f"{r},{_r(v)},{stats.counts[r]}\n")


def band_svg(timestamps, y_true, mean, lower, upper, title: str = "",
             width: int = 900, height: int = 320) -> str:
    """Line chart of observed and mean flow with a shaded interval band.

    Output depends only on the inputs (fixed number formatting, no clock).
    """
    t = np.asarray(timestamps, dtype=np.float64)
    series = [np.asarray(a, dtype=np.float64) for a in (y_true, mean, lower, upper)]
    pad_l, pad_r, pad_t, pad_b = 50, 10, 24, 30
    x0, x1 = t.min(), t.max() if t.max() > t.min() else t.min() + 1
    lo = min(s.min() for s in series)
    hi = max(s.max() for s in series)
    if hi <= lo:
        hi = lo + 1.0

    def px(v):
        return pad_l + (v - x0) / (x1 - x0) * (width - pad_l - pad_r)

    def py(v):
        return height - pad_b - (v - lo) / (hi - lo) * (height - pad_t - pad_b)

    def pts(xs, ys):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))

    y, m, l, u = series
    band = "M " + pts(t, u) + " L " + pts(t[::-1], l[::-1]) + " Z"
    hours = (t - x0) / 3600.0
    ticks = []
    for h in range(0, int(hours.max()) + 1, 6):
        x = px(x0 + h * 3600.0)
        ticks.append(f'<line x1="{x:.2f}" y1="{height - pad_b}" x2="{x:.2f}" y2="{height - pad_b + 4}" stroke="#444"/>'
                     f'<text x="{x:.2f}" y="{height - 8}" font-size="10" text-anchor="middle">{h}h</text>')
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        ticks.append(f'<text x="{pad_l - 4}" y="{py(v) + 3:.2f}" font-size="10" text-anchor="end">{v:.0f}</text>')
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{pad_l}" y="15" font-size="12">{title}</text>',
        f'<path d="{band}" fill="#d62728" fill-opacity="0.25" stroke="none"/>',
        f'<polyline points="{pts(t, y)}" fill="none" stroke="black" stroke-width="1"/>',
        f'<polyline points="{pts(t, m)}" fill="none" stroke="#d62728" stroke-width="1"/>',
        f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="#444"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="#444"/>',
        *ticks,
        "</svg>",
    ]) + "\n"


def write_text(path, text: str) -> None:
    Path(path).write_text(text)
