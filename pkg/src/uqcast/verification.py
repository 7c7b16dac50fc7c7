"""Self-checks run by ``uqcast verify``.

Each suite returns a list of :class:`Check` records; a failing check names the
rule it exercises.  ``corrupt_rule`` swaps one VJP rule for a wrong one so the
gradient suite can be shown to fail (negative control).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import Series, make_windows, prepare, split_chronological
from .layers import SpectralState, power_iteration, spectral_normalize
from .training import gradient_check_model, reduced_config
from .uncertainty import McEnsemble, decompose


@dataclass
class Check:
    suite: str
    rule: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.suite}:{self.rule} {self.detail}".rstrip()


@contextlib.contextmanager
def corrupt_rule(op: str):
    """Temporarily scale the output of one VJP rule by 1.5."""
    if op not in nx.VJP_RULES:
        raise KeyError(f"unknown VJP rule {op!r}; known: {sorted(nx.VJP_RULES)}")
    original = nx.VJP_RULES[op]

    def bad(node, g):
        return tuple(None if p is None else 1.5 * p for p in original(node, g))

    nx.VJP_RULES[op] = bad
    try:
        yield
    finally:
        nx.VJP_RULES[op] = original


# Each probe builds one recorded op from leaves drawn in that op's safe domain.
_PROBES = {
    "add": ((2, 3), (1, 3)), "sub": ((2, 3), (2, 1)), "hadamard": ((2, 3), (2, 3)),
    "div": ((2, 3), (2, 3)), "scale": ((2, 3),), "matmul": ((2, 3), (3, 4)),
    "transpose": ((2, 3),), "tanh": ((2, 3),), "sigmoid": ((2, 3),), "leaky_relu": ((2, 3),),
    "exp": ((2, 3),), "log": ((2, 3),), "square": ((2, 3),), "sqrt": ((2, 3),),
    "clip": ((2, 3),), "concat_cols": ((2, 2), (2, 3)), "slice_cols": ((2, 5),),
    "sum_all": ((2, 3),), "mean_all": ((2, 3),), "row_mean": ((2, 3),),
}


def _apply_probe(op: str, args):
    if op == "scale":
        return nx.scale(args[0], -1.7)
    if op == "leaky_relu":
        return nx.leaky_relu(args[0], 0.3)
    if op == "clip":
        return nx.clip(args[0], 0.5, 1.5)
    if op == "concat_cols":
        return nx.concat_cols(args)
    if op == "slice_cols":
        return nx.slice_cols(args[0], 1, 4)
    if op in ("matmul", "transpose", "sum_all", "mean_all", "row_mean"):
        return getattr(nx, op)(*args)
    return nx.elementwise(op, *args)


def _rule_error(op: str, rng: np.random.Generator) -> float:
    """Max relative error of one VJP rule against central differences.

    The rule is called directly with a random cotangent so no other rule is
    involved; inputs keep clear of kinks and of zero.
    """
    values = [rng.uniform(0.2, 2.0, shp) for shp in _PROBES[op]]
    if op == "clip":
        values[0] = rng.choice([0.3, 1.0, 1.8], size=_PROBES[op][0]) + rng.uniform(-0.1, 0.1, _PROBES[op][0])
    if op == "leaky_relu":
        values[0] *= rng.choice([-1.0, 1.0], size=_PROBES[op][0])
    tape = nx.Tape()
    out = _apply_probe(op, [tape.leaf(v) for v in values])
    cot = rng.uniform(-1.0, 1.0, out.shape)
    pulled = nx.VJP_RULES[op](out, cot)
    worst = 0.0
    for k, v in enumerate(values):
        def f(theta, k=k):
            args = [theta if j == k else values[j] for j in range(len(values))]
            t = nx.Tape()
            return float(np.sum(cot * _apply_probe(op, [t.constant(a) for a in args]).value))

        fd = nx.finite_difference_gradient(f, v.copy())
        worst = max(worst, float(np.max(nx.relative_error(pulled[k], fd))))
    return worst


def rule_suite(fast: bool = False) -> list[Check]:
    rng = np.random.default_rng(5)
    out = []
    for op in sorted(_PROBES):
        err = _rule_error(op, rng)
        out.append(Check("vjp-rules", op, err < 1e-6, f"max_rel={err:.2e}"))
    return out


def gradient_suite(fast: bool = False) -> list[Check]:
    out = []
    for mode in ("none", "layer", "spectral"):
        res = gradient_check_model(reduced_config(mode), batch=3 if fast else 5)
        out.append(Check("gradient-check", mode, res.passed,
                         f"max_rel={res.max_rel_error:.2e} worst={res.worst_param}{list(res.worst_index)}"))
    return out


def spectral_suite(fast: bool = False) -> list[Check]:
    out = []
    s, _ = power_iteration(np.diag([3.0, 1.0]), np.array([0.6, 0.8]), 60)
    out.append(Check("spectral-norm-oracle", "diag", abs(s - 3.0) < 1e-12, f"sigma={s!r}"))
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((6, 6)))
    wn, s = spectral_normalize(q, SpectralState(np.ones(6), 20), update=False)
    out.append(Check("spectral-norm-oracle", "orthogonal",
                     abs(s - 1.0) < 1e-12 and np.allclose(wn, q, atol=1e-12), f"sigma={s!r}"))
    rng = np.random.default_rng(1)
    worst, worst_post = 0.0, 0.0
    for _ in range(10 if fast else 50):
        r, c = rng.integers(1, 31, size=2)
        w = rng.standard_normal((r, c))
        st = SpectralState(rng.standard_normal(r), 2000)
        sig, _ = power_iteration(w, st.u, st.n_iter)
        oracle = float(np.sqrt(np.linalg.eigvalsh(w.T @ w).max()))
        worst = max(worst, abs(sig - oracle) / oracle)
        wn, _ = spectral_normalize(w, st, update=False)
        post, _ = power_iteration(wn, st.u, st.n_iter)
        worst_post = max(worst_post, abs(post - 1.0))
    out.append(Check("spectral-norm-oracle", "random-converged", worst < 1e-6, f"max_rel={worst:.2e}"))
    out.append(Check("spectral-norm-oracle", "post-normalization", worst_post <= 0.01,
                     f"max_dev={worst_post:.2e}"))
    return out


def decomposition_suite(fast: bool = False) -> list[Check]:
    rng = np.random.default_rng(2)
    T, n = 10, (20 if fast else 200)
    means = rng.normal(size=(T, n))
    log_vars = rng.normal(size=(T, n))
    est = decompose(McEnsemble(means, log_vars))
    centred = means - means.mean(axis=0)
    oracle = (centred ** 2).mean(axis=0)
    err = float(np.max(np.abs(est.epistemic_var - oracle)))
    same = decompose(McEnsemble(np.repeat(means[:1], T, 0), log_vars))
    return [
        Check("decomposition", "two-pass-oracle", err <= 1e-12, f"max_abs={err:.2e}"),
        Check("decomposition", "additivity",
              bool(np.all(est.total_var == est.epistemic_var + est.aleatoric_var))),
        Check("decomposition", "identical-passes", bool(np.all(same.epistemic_var == 0.0))),
        Check("decomposition", "aleatoric-mean",
              bool(np.allclose(est.aleatoric_var, np.exp(log_vars).mean(axis=0), rtol=1e-13, atol=0))),
    ]


def windowing_suite(fast: bool = False) -> list[Check]:
    out = []
    s = Series(300 * np.arange(10), np.arange(10.0))
    ds = make_windows(s, 3, 1)
    out.append(Check("windowing", "count", len(ds) == 7, f"windows={len(ds)}"))
    N, L, h = (200, 5, 2)
    v = np.random.default_rng(3).uniform(0, 50, N)
    ds = make_windows(Series(300 * np.arange(N), v), L, h)
    ok = np.array_equal(ds.y, v[L + h - 1:]) and all(
        np.array_equal(ds.X[i], v[i:i + L]) for i in range(len(ds)))
    out.append(Check("windowing", "target-reconstruction", bool(ok)))
    ds = split_chronological(make_windows(Series(300 * np.arange(N), v), L, h))
    t = ds.target_timestamps
    order = (t[ds.mask("train")].max() < t[ds.mask("val")].min() < t[ds.mask("test")].min())
    out.append(Check("windowing", "split-order", bool(order)))
    poisoned = v.copy()
    n_tr = int(ds.mask("train").sum())
    poisoned[n_tr + L + h + 5] = 1e6  # lands only in validation/test windows
    a = prepare(Series(300 * np.arange(N), v), L, h).scaler
    b = prepare(Series(300 * np.arange(N), poisoned), L, h).scaler
    out.append(Check("windowing", "scaler-train-only", a == b, f"max={b.max!r}"))
    gaps = np.zeros(N, dtype=bool)
    gaps[50] = True
    ds = make_windows(Series(300 * np.arange(N), v, gaps=gaps), L, h)
    expect = (N - L - h + 1) - (L + h)
    out.append(Check("windowing", "gap-drop", len(ds) == expect and ds.n_gap_dropped == L + h,
                     f"windows={len(ds)} dropped={ds.n_gap_dropped}"))
    return out


SUITES = {
    "vjp-rules": rule_suite,
    "gradient-check": gradient_suite,
    "spectral-norm-oracle": spectral_suite,
    "decomposition": decomposition_suite,
    "windowing": windowing_suite,
}


def run_all(fast: bool = False, corrupt: str | None = None) -> list[Check]:
    ctx = corrupt_rule(corrupt) if corrupt else contextlib.nullcontext()
    checks = []
    with ctx:
        for suite in SUITES.values():
            checks.extend(suite(fast))
    return checks
