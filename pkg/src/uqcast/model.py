"""Stacked Bayesian LSTM forecaster producing (mean, log-variance)."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .layers import (
    DenseParams,
    DropoutSpec,
    LayerNormParams,
    LstmParams,
    LstmState,
    SpectralState,
    dense_forward,
    init_params,
    layer_norm,
    lstm_step,
    power_iteration,
    spectral_normalize,
)
from .numerics import NonFiniteError, RngStream, Var

FORMAT_VERSION = 1
NORM_MODES = ("none", "layer", "spectral")
FORWARD_MODES = ("train", "mc", "deterministic")
GATES = ("f", "i", "o", "c")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    lstm_units: list[int] = field(default_factory=lambda: [20, 20, 10])
    dense_units: list[int] = field(default_factory=lambda: [10, 10, 6, 2])
    dropout_rate: float = 0.02
    norm_mode: str = "none"
    leaky_alpha: float = 0.3
    lookback: int = 12
    horizon: int = 1
    seed: int = 0
    ln_eps: float = 1e-5
    recurrent_mask: str = "per_step"  # or "fixed": one mask per layer per sequence
    sn_train_iters: int = 1
    sn_eval_iters: int = 20

    def __post_init__(self):
        self.lstm_units = [int(u) for u in self.lstm_units]
        self.dense_units = [int(u) for u in self.dense_units]
        if not self.lstm_units or min(self.lstm_units) < 1:
            raise ValueError(f"invalid lstm_units {self.lstm_units}")
        if not self.dense_units or min(self.dense_units) < 1:
            raise ValueError(f"invalid dense_units {self.dense_units}")
        if self.dense_units[-1] != 2:
            raise ValueError("the final dense layer must have width 2 (mean, log-variance)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.lookback < 1 or self.horizon < 1:
            raise ValueError("lookback and horizon must be >= 1")
        if self.recurrent_mask not in ("per_step", "fixed"):
            raise ValueError(f"unknown recurrent_mask {self.recurrent_mask!r}")
        if self.norm_mode == "layer":
            small = [u for u in self.lstm_units + self.dense_units[:-1] if u < 2]
            if small:
                raise ValueError("layer normalization needs every normalized layer to have >= 2 units")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    mean: np.ndarray  # (batch,)
    log_var: np.ndarray  # (batch,)
    features: np.ndarray  # (batch, penultimate width)


@dataclass
class Graph:
    """Tape-level handles from one forward pass (used by training and saliency)."""

    tape: nx.Tape
    mean: Var
    log_var: Var
    features: Var
    leaves: dict[str, Var]
    inputs: Var
    hidden: Var  # last LSTM layer output at the final step


class Model:
    """Parameter store plus the architecture defined by ``config``.

    ``params`` maps names such as ``lstm0.W_f`` or ``dense2.b`` to 2-D arrays;
    biases and layer-norm vectors are ``(1, n)`` rows.  ``spectral`` holds one
    :class:`SpectralState` per normalized weight matrix when
    ``norm_mode == "spectral"``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 spectral: dict[str, SpectralState] | None = None, scaler=None):
        self.config = config
        self.params = params
        self.spectral = spectral or {}
        self.scaler = scaler

    def copy(self) -> "Model":
        return Model(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()},
                     {k: SpectralState(s.u.copy(), s.n_iter) for k, s in self.spectral.items()},
                     self.scaler)

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {"lstm": [], "dense": []}
        for name in self.params:
            groups["lstm" if name.startswith("lstm") else "dense"].append(name)
        return groups

    def forward(self, windows, mode="deterministic", rng=None) -> ForwardOutput:
        return forward(self, windows, mode, rng)


def build_model(config: ModelConfig, rng: RngStream | None = None) -> Model:
    rng = rng if rng is not None else RngStream(config.seed)
    params: dict[str, np.ndarray] = {}
    spectral: dict[str, SpectralState] = {}
    width = 1
    for k, H in enumerate(config.lstm_units):
        for g in GATES:
            params[f"lstm{k}.W_{g}"] = init_params((H, H + width), rng, "glorot_uniform")
        for g in GATES:
            kind = "forget_bias_one" if g == "f" else "zeros"
            params[f"lstm{k}.b_{g}"] = init_params((1, H), rng, kind)
        if config.norm_mode == "layer":
            params[f"lstm{k}.ln_gamma"] = init_params((1, H), rng, "ones")
            params[f"lstm{k}.ln_beta"] = init_params((1, H), rng, "zeros")
        width = H
    n_dense = len(config.dense_units)
    for k, units in enumerate(config.dense_units):
        params[f"dense{k}.w"] = init_params((units, width), rng, "glorot_uniform")
        params[f"dense{k}.b"] = init_params((1, units), rng, "zeros")
        if config.norm_mode == "layer" and k < n_dense - 1:
            params[f"dense{k}.ln_gamma"] = init_params((1, units), rng, "ones")
            params[f"dense{k}.ln_beta"] = init_params((1, units), rng, "zeros")
        width = units
    if config.norm_mode == "spectral":
        for name in spectral_names(config):
            spectral[name] = SpectralState.random(params[name].shape[0], rng, config.sn_train_iters)
    return Model(config, params, spectral)


def spectral_names(config: ModelConfig) -> list[str]:
    names = [f"lstm{k}.W_{g}" for k in range(len(config.lstm_units)) for g in GATES]
    names += [f"dense{k}.w" for k in range(len(config.dense_units))]
    return names


def spectral_sigmas(model: Model, n_iter: int | None = None) -> dict[str, float]:
    """Current spectral-norm estimates without touching the persisted vectors."""
    n_iter = model.config.sn_eval_iters if n_iter is None else n_iter
    return {name: power_iteration(model.params[name], st.u, n_iter)[0]
            for name, st in model.spectral.items()}


def _as_windows(windows, lookback: int) -> np.ndarray:
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != lookback:
        raise nx.ShapeError(f"expected windows of length {lookback}, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise NonFiniteError("input windows contain non-finite values")
    return X


class _layer_scope:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if et is NonFiniteError and not str(ev).startswith("layer "):
            raise NonFiniteError(f"layer {self.name}: {ev}") from ev
        return False


def build_graph(model: Model, windows, mode: str = "deterministic", rng: RngStream | None = None,
                tape: nx.Tape | None = None, trainable=None, sigmas: dict[str, float] | None = None,
                input_grad: bool = False) -> Graph:
    """Run the forward pass on a tape.

    ``trainable`` restricts which parameters become gradient-carrying leaves
    (``None`` means all).  In ``train`` mode the persisted spectral vectors of
    trainable matrices advance by ``sn_train_iters`` steps; every other mode
    uses ``sn_eval_iters`` steps without mutating them.  ``sigmas`` pins the
    spectral estimates (finite-difference checks need them held fixed).
    """
    cfg = model.config
    if mode not in FORWARD_MODES:
        raise ValueError(f"mode must be one of {FORWARD_MODES}")
    X = _as_windows(windows, cfg.lookback)
    if mode != "deterministic" and cfg.dropout_rate > 0 and rng is None:
        raise ValueError(f"mode {mode!r} with dropout needs an RngStream")
    tape = tape or nx.Tape()
    B = X.shape[0]
    drop = DropoutSpec(cfg.dropout_rate, "off" if mode == "deterministic" else mode)

    leaves: dict[str, Var] = {}
    for name, value in model.params.items():
        if not np.isfinite(value).all():
            raise NonFiniteError(f"layer {name.split('.')[0]}: parameter {name} is non-finite")
        rg = trainable is None or name in trainable
        leaves[name] = tape.leaf(value, name=name, requires_grad=rg)

    def weight(name: str) -> Var:
        if name not in model.spectral:
            return leaves[name]
        if sigmas is not None:
            sigma = sigmas[name]
        elif mode == "train" and (trainable is None or name in trainable):
            sigma = spectral_normalize(model.params[name], model.spectral[name],
                                       cfg.sn_train_iters, update=True)[1]
        else:
            sigma = power_iteration(model.params[name], model.spectral[name].u, cfg.sn_eval_iters)[0]
        # sigma is a constant of the step; gradients flow to the raw weight only through 1/sigma
        return nx.scale(leaves[name], 1.0 / sigma)

    inputs = tape.leaf(X, name="inputs", requires_grad=input_grad)
    seq = [nx.slice_cols(inputs, t, t + 1) for t in range(cfg.lookback)]

    for k, H in enumerate(cfg.lstm_units):
        with _layer_scope(f"lstm{k}"):
            p = LstmParams(*(weight(f"lstm{k}.W_{g}") for g in GATES),
                           *(leaves[f"lstm{k}.b_{g}"] for g in GATES))
            ln = None
            if cfg.norm_mode == "layer":
                ln = LayerNormParams(leaves[f"lstm{k}.ln_gamma"], leaves[f"lstm{k}.ln_beta"], cfg.ln_eps)
            mask = None
            if cfg.recurrent_mask == "fixed" and drop.active:
                mask = drop.mask((B, H), rng)
            state = LstmState.zeros(tape, B, H)
            out = []
            for x_t in seq:
                state = lstm_step(p, state, x_t, drop, rng, mask=mask)
                out.append(layer_norm(ln, state.h) if ln is not None else state.h)
            seq = out

    hidden = seq[-1]
    h, features = _dense_stack(cfg, hidden, weight, leaves, drop, rng)
    mean = nx.slice_cols(h, 0, 1)
    log_var = nx.slice_cols(h, 1, 2)
    return Graph(tape, mean, log_var, features, leaves, inputs, hidden)


def _dense_stack(cfg: ModelConfig, h: Var, weight, leaves, drop: DropoutSpec, rng):
    """Dense layers on top of the last LSTM output; returns (output, penultimate features)."""
    n_dense = len(cfg.dense_units)
    features = h
    for k in range(n_dense):
        last = k == n_dense - 1
        with _layer_scope(f"dense{k}"):
            p = DenseParams(weight(f"dense{k}.w"), leaves[f"dense{k}.b"],
                            "linear" if last else "leaky_relu", cfg.leaky_alpha)
            ln = None
            if cfg.norm_mode == "layer" and not last:
                ln = LayerNormParams(leaves[f"dense{k}.ln_gamma"], leaves[f"dense{k}.ln_beta"], cfg.ln_eps)
            if last:
                features = h
            h = dense_forward(p, h, DropoutSpec() if last else drop, rng, ln)
    return h, features


def dense_head(model: Model, h) -> np.ndarray:
    """Deterministic output of the dense sub-network for last-LSTM-layer states ``h``.

    Spectral estimates use ``sn_eval_iters`` steps from the persisted vectors,
    exactly as in a deterministic forward pass.
    """
    cfg = model.config
    tape = nx.Tape()
    leaves = {n: tape.constant(v) for n, v in model.params.items() if n.startswith("dense")}

    def weight(name):
        if name not in model.spectral:
            return leaves[name]
        sigma = power_iteration(model.params[name], model.spectral[name].u, cfg.sn_eval_iters)[0]
        return nx.scale(leaves[name], 1.0 / sigma)

    out, _ = _dense_stack(cfg, tape.constant(h), weight, leaves, DropoutSpec(), None)
    return out.value


def effective_dense_weights(model: Model) -> list[np.ndarray]:
    """Dense weight matrices as applied at inference (divided by their estimate when normalized)."""
    cfg = model.config
    out = []
    for k in range(len(cfg.dense_units)):
        name = f"dense{k}.w"
        w = model.params[name]
        if name in model.spectral:
            w = w / power_iteration(w, model.spectral[name].u, cfg.sn_eval_iters)[0]
        out.append(w)
    return out


def forward(model: Model, windows, mode: str = "deterministic", rng: RngStream | None = None,
            chunk: int = 4096) -> ForwardOutput:
    """Mean, log-variance and penultimate features for each window."""
    X = _as_windows(windows, model.config.lookback)
    means, logs, feats = [], [], []
    for start in range(0, X.shape[0], chunk):
        g = build_graph(model, X[start:start + chunk], mode, rng, trainable=frozenset())
        means.append(g.mean.value[:, 0])
        logs.append(g.log_var.value[:, 0])
        feats.append(g.features.value)
    return ForwardOutput(np.concatenate(means), np.concatenate(logs), np.concatenate(feats))


# ----------------------------------------------------------------- checkpoints


def model_to_dict(model: Model) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "parameters": {k: v.tolist() for k, v in model.params.items()},
        "spectral_u_vectors": {k: s.u.tolist() for k, s in model.spectral.items()},
        "scaler": None if model.scaler is None else model.scaler.to_dict(),
    }


def save_model(model: Model, path) -> None:
    text = json.dumps(model_to_dict(model), indent=1)
    Path(path).write_text(text + "\n")


def model_from_dict(doc: dict) -> Model:
    from .data import Scaler

    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}; expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(doc["config"])
        reference = build_model(config, RngStream(0))
        params = {}
        for name, ref in reference.params.items():
            arr = np.array(doc["parameters"][name], dtype=np.float64)
            if arr.shape != ref.shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {ref.shape}")
            params[name] = arr
        extra = set(doc["parameters"]) - set(reference.params)
        if extra:
            raise CheckpointError(f"unexpected parameters {sorted(extra)}")
        spectral = {}
        for name, ref in reference.spectral.items():
            spectral[name] = SpectralState(np.array(doc["spectral_u_vectors"][name], dtype=np.float64),
                                           config.sn_train_iters)
            # SpectralState renormalizes; keep the stored vector bit-exact
            spectral[name].u = np.array(doc["spectral_u_vectors"][name], dtype=np.float64)
        scaler = Scaler.from_dict(doc["scaler"]) if doc.get("scaler") else None
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return Model(config, params, spectral, scaler)


def load_model(path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    return model_from_dict(doc)
