"""Layer primitives: LSTM cell with recurrent dropout, dense, layer norm, spectral norm."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics as nx
from .numerics import RngStream, Var

DROPOUT_MODES = ("off", "train", "mc")


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    mode: str = "off"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in DROPOUT_MODES:
            raise ValueError(f"unknown dropout mode {self.mode!r}")

    @property
    def active(self) -> bool:
        return self.mode != "off" and self.rate > 0.0

    def mask(self, shape, rng: RngStream) -> np.ndarray:
        """Inverted-dropout mask: Bernoulli(1-p) scaled by 1/(1-p)."""
        keep = 1.0 - self.rate
        return rng.keep_mask(shape, keep) / keep


@dataclass
class LstmParams:
    """Gate weights act on the concatenation ``[h_{t-1}, x_t]``; shapes ``(H, H+D)``."""

    W_f: Var
    W_i: Var
    W_o: Var
    W_c: Var
    b_f: Var
    b_i: Var
    b_o: Var
    b_c: Var

    def __post_init__(self):
        shapes = {w.shape for w in (self.W_f, self.W_i, self.W_o, self.W_c)}
        if len(shapes) != 1:
            raise nx.ShapeError(f"gate matrices disagree in shape: {sorted(shapes)}")
        H, HD = self.W_f.shape
        if H < 1 or HD <= H:
            raise nx.ShapeError(f"gate matrix shape {self.W_f.shape} leaves no input width")

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    @cached_property
    def fused(self) -> tuple[Var, Var]:
        # one (H+D, 4H) product per step instead of four
        w = nx.concat_cols([self.W_f.T, self.W_i.T, self.W_o.T, self.W_c.T])
        b = nx.concat_cols([self.b_f, self.b_i, self.b_o, self.b_c])
        return w, b


@dataclass
class LstmState:
    h: Var
    C: Var

    @classmethod
    def zeros(cls, tape: nx.Tape, batch: int, hidden: int) -> "LstmState":
        z = np.zeros((batch, hidden))
        return cls(tape.constant(z), tape.constant(z))


def lstm_step(params: LstmParams, state: LstmState, x_t, drop: DropoutSpec,
              rng: RngStream | None, mask: np.ndarray | None = None) -> LstmState:
    """One LSTM update with dropout on the candidate cell vector.

    ``x_t`` is ``(batch, D)``.  When ``mask`` is given it replaces the per-step
    draw (fixed-mask variant).
    """
    H = params.hidden
    if x_t.shape[1] != params.input_dim:
        raise nx.ShapeError(f"lstm_step: input width {x_t.shape[1]} != {params.input_dim}")
    if state.h.shape[1] != H or state.C.shape[1] != H:
        raise nx.ShapeError(f"lstm_step: state width does not match hidden size {H}")
    w, b = params.fused
    z = nx.concat_cols([state.h, x_t])
    pre = nx.add(nx.matmul(z, w), b)
    f = nx.sigmoid(nx.slice_cols(pre, 0, H))
    i = nx.sigmoid(nx.slice_cols(pre, H, 2 * H))
    o = nx.sigmoid(nx.slice_cols(pre, 2 * H, 3 * H))
    cand = nx.tanh(nx.slice_cols(pre, 3 * H, 4 * H))
    if mask is not None:
        cand = nx.hadamard(cand, mask)
    elif drop.active:
        cand = nx.hadamard(cand, drop.mask(cand.shape, rng))
    C = nx.add(nx.hadamard(f, state.C), nx.hadamard(i, cand))
    h = nx.hadamard(o, nx.tanh(C))
    return LstmState(h, C)


@dataclass
class LayerNormParams:
    gamma: Var
    beta: Var
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layer-norm eps must be positive")


def layer_norm(params: LayerNormParams, x) -> Var:
    """Per-row re-centering and re-scaling over the ``H`` columns."""
    H = x.shape[1]
    if H < 2:
        raise nx.ShapeError("layer_norm needs at least two units per vector")
    if params.gamma.shape[1] != H or params.beta.shape[1] != H:
        raise nx.ShapeError(f"layer_norm: gamma/beta width does not match {H}")
    centred = nx.sub(x, nx.row_mean(x))
    sd = nx.sqrt(nx.add(nx.row_mean(nx.square(centred)), params.eps))
    return nx.add(nx.hadamard(nx.div(centred, sd), params.gamma), params.beta)


@dataclass
class DenseParams:
    w: Var  # (out, in)
    b: Var  # (1, out)
    activation: str = "leaky_relu"
    alpha: float = 0.3

    def __post_init__(self):
        if self.activation not in ("leaky_relu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.b.shape != (1, self.w.shape[0]):
            raise nx.ShapeError(f"bias shape {self.b.shape} does not match weight {self.w.shape}")


def dense_forward(params: DenseParams, x, drop: DropoutSpec, rng: RngStream | None,
                  norm: LayerNormParams | None = None) -> Var:
    """``activation(x w^T + b)`` on row-major batches, then dropout.

    With ``norm`` the pre-activation is layer-normalized first.
    """
    if x.shape[1] != params.w.shape[1]:
        raise nx.ShapeError(f"dense_forward: input width {x.shape[1]} != {params.w.shape[1]}")
    out = nx.add(nx.matmul(x, nx.transpose(params.w)), params.b)
    if norm is not None:
        out = layer_norm(norm, out)
    if params.activation == "leaky_relu":
        out = nx.leaky_relu(out, params.alpha)
    if drop.active:
        out = nx.hadamard(out, drop.mask(out.shape, rng))
    return out


@dataclass
class SpectralState:
    """Persisted left singular-vector estimate for one weight matrix."""

    u: np.ndarray
    n_iter: int = 1

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(self.u)
        if n == 0:
            raise ValueError("spectral state vector must be non-zero")
        self.u = self.u / n

    @classmethod
    def random(cls, rows: int, rng: RngStream, n_iter: int = 1) -> "SpectralState":
        return cls(rng.normal(size=rows), n_iter)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("power iteration collapsed to the zero vector")
    return v / n


def power_iteration(w: np.ndarray, u: np.ndarray, n_iter: int) -> tuple[float, np.ndarray]:
    """Return ``(sigma_hat, u_new)`` after ``n_iter`` alternating steps."""
    for _ in range(n_iter):
        v = _unit(w.T @ u)
        u = _unit(w @ v)
    return float(u @ w @ v), u


def spectral_normalize(w, state: SpectralState, n_iter: int | None = None,
                       update: bool = True) -> tuple[np.ndarray, float]:
    """Divide ``w`` by its power-iteration spectral-norm estimate.

    Runs ``n_iter`` (default ``state.n_iter``) steps from the persisted ``u``;
    the refined ``u`` is written back unless ``update`` is false.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        raise ValueError("spectral_normalize: zero matrix has no usable spectral norm")
    steps = state.n_iter if n_iter is None else n_iter
    if steps < 1:
        raise ValueError("at least one power-iteration step is required")
    sigma, u = power_iteration(w, state.u, steps)
    if update:
        state.u = u
    return w / sigma, sigma


def init_params(shape, rng: RngStream | None, kind: str = "glorot_uniform") -> np.ndarray:
    """Initial parameter block.

    ``glorot_uniform`` draws from U(-limit, limit) with
    limit = sqrt(6 / (fan_in + fan_out)), fan_out = rows, fan_in = cols.
    """
    if isinstance(shape, int):
        shape = (shape, 1)
    shape = tuple(int(s) for s in shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "forget_bias_one":
        return np.ones(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "glorot_uniform":
        fan_out, fan_in = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)
    raise ValueError(f"unknown init kind {kind!r}")
