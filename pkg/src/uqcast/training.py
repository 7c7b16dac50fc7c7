"""Heteroscedastic NLL, Adadelta, and the epoch loop with best-validation selection."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import Model, ModelConfig, build_graph, build_model, forward, spectral_sigmas
from .numerics import RngStream, Var

log = logging.getLogger(__name__)

S_CLAMP = (-15.0, 15.0)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


def nll_loss(y, y_hat, s, clamp: tuple[float, float] = S_CLAMP):
    """Mean over the batch of ``0.5 * exp(-s) * (y - y_hat)^2 + 0.5 * s``.

    ``s`` is the predicted log-variance, clamped to ``clamp`` before use.
    Returns a tape scalar when any argument is a :class:`Var`, else a float.
    """
    on_tape = any(isinstance(a, Var) for a in (y, y_hat, s))
    if not on_tape:
        y, y_hat, s = (np.asarray(a, dtype=np.float64).reshape(-1, 1) for a in (y, y_hat, s))
    size = (y_hat.value if isinstance(y_hat, Var) else y_hat).size
    if size == 0:
        raise ValueError("nll_loss on an empty batch")
    tape = nx._tape_of((y, y_hat, s))
    y, y_hat, s = (nx._lift(a, tape) for a in (y, y_hat, s))
    s_c = nx.clip(s, *clamp)
    resid2 = nx.square(nx.sub(y, y_hat))
    per = nx.add(nx.scale(nx.hadamard(nx.exp(nx.scale(s_c, -1.0)), resid2), 0.5), nx.scale(s_c, 0.5))
    loss = nx.mean_all(per)
    return loss if on_tape else float(loss.value[0, 0])


@dataclass
class AdadeltaState:
    lr: float = 0.10
    rho: float = 0.95
    eps: float = 1e-7
    acc_grad: dict[str, np.ndarray] = field(default_factory=dict)
    acc_delta: dict[str, np.ndarray] = field(default_factory=dict)


def adadelta_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                  state: AdadeltaState) -> tuple[dict[str, np.ndarray], AdadeltaState]:
    """In-place Adadelta update of every parameter that has a gradient."""
    rho, eps = state.rho, state.eps
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        eg = state.acc_grad.get(name)
        if eg is None:
            eg = state.acc_grad[name] = np.zeros_like(p)
            state.acc_delta[name] = np.zeros_like(p)
        ed = state.acc_delta[name]
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = -(np.sqrt(ed + eps) / np.sqrt(eg + eps)) * g
        ed *= rho
        ed += (1.0 - rho) * delta * delta
        p += state.lr * delta
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.10
    rho: float = 0.95
    eps: float = 1e-7
    s_clamp: tuple[float, float] = S_CLAMP
    val_mode: str = "deterministic"  # or "mc": mean loss over mc-mode passes
    val_passes: int = 10


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    wall_time: float = 0.0

    def rows(self):
        for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            yield i, tr, va

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for i, tr, va in self.rows():
                fh.write(f"{i},{tr!r},{va!r}\n")


def loss_and_grads(model: Model, X, y, mode: str, rng: RngStream | None, trainable=None,
                   sigmas=None, s_clamp=S_CLAMP) -> tuple[float, dict[str, np.ndarray]]:
    g = build_graph(model, X, mode, rng, trainable=trainable, sigmas=sigmas)
    target = g.tape.constant(np.asarray(y, dtype=np.float64).reshape(-1, 1))
    loss = nll_loss(target, g.mean, g.log_var, s_clamp)
    leaf_grads = nx.backward(loss)
    grads = {}
    for name, leaf in g.leaves.items():
        if leaf.requires_grad:
            grads[name] = leaf_grads.get(leaf, np.zeros_like(leaf.value))
    return float(loss.value[0, 0]), grads


def evaluate_loss(model: Model, X, y, s_clamp=S_CLAMP, mode="deterministic",
                  rng: RngStream | None = None, passes: int = 1) -> float:
    if mode == "deterministic":
        out = forward(model, X)
        return nll_loss(y, out.mean, out.log_var, s_clamp)
    losses = [nll_loss(y, o.mean, o.log_var, s_clamp)
              for o in (forward(model, X, "mc", rng) for _ in range(passes))]
    return float(np.mean(losses))


def train(model: Model, dataset, config: TrainConfig | None = None, rng: RngStream | None = None,
          trainable=None, on_epoch=None) -> tuple[Model, TrainReport]:
    """Mini-batch Adadelta on the NLL, keeping the epoch with lowest validation loss.

    ``dataset`` is a :class:`~uqcast.data.WindowedDataset`; its ``train`` and
    ``val`` splits are used.  ``model`` is updated in place and a copy of the
    best epoch's parameters is returned.  ``on_epoch(epoch, train, val)`` is
    called after every epoch; a truthy return ends training early.
    """
    config = config or TrainConfig()
    rng = rng if rng is not None else RngStream(model.config.seed)
    X_tr, y_tr = dataset.split("train")
    X_va, y_va = dataset.split("val")
    if len(y_tr) == 0 or len(y_va) == 0:
        raise ValueError("training needs non-empty train and validation splits")
    report = TrainReport()
    best = model.copy()
    if config.epochs == 0:
        return best, report
    state = AdadeltaState(config.lr, config.rho, config.eps)
    best_val = np.inf
    t0 = time.perf_counter()
    n = len(y_tr)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            try:
                loss, grads = loss_and_grads(model, X_tr[idx], y_tr[idx], "train", rng,
                                             trainable, s_clamp=config.s_clamp)
            except nx.NonFiniteError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, "non-finite training loss")
            total += loss * len(idx)
            adadelta_step(model.params, grads, state)
        try:
            val = evaluate_loss(model, X_va, y_va, config.s_clamp, config.val_mode, rng, config.val_passes)
        except nx.NonFiniteError as exc:
            raise TrainingDivergedError(epoch, str(exc)) from exc
        if not np.isfinite(val):
            raise TrainingDivergedError(epoch, "non-finite validation loss")
        report.train_loss.append(total / n)
        report.val_loss.append(val)
        if val < best_val:
            best_val = val
            report.best_epoch = epoch
            best = model.copy()
        if on_epoch is not None and on_epoch(epoch, total / n, val):
            break
        log.debug("epoch %d train %.6f val %.6f", epoch, total / n, val)
    report.wall_time = time.perf_counter() - t0
    return best, report


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} at "
                f"{self.worst_param}{list(self.worst_index)} over {self.n_checked} coordinates")


def reduced_config(norm_mode: str = "none", **overrides) -> ModelConfig:
    kw = dict(lstm_units=[3], dense_units=[3, 2], lookback=4, dropout_rate=0.1,
              norm_mode=norm_mode, seed=7)
    kw.update(overrides)
    return ModelConfig(**kw)


def gradient_check_model(config: ModelConfig | None = None, tolerance: float = 1e-4,
                         h: float = 1e-6, batch: int = 5, seed: int = 11) -> GradCheckResult:
    """Tape gradients of the NLL against central differences for every parameter.

    Dropout masks are replayed by re-seeding the stream for each evaluation and
    spectral estimates are pinned, so the loss is a fixed function of the
    parameters.
    """
    config = config or reduced_config()
    model = build_model(config, RngStream(config.seed))
    data_rng = np.random.default_rng(seed)
    X = data_rng.uniform(-2.0, 2.0, size=(batch, config.lookback))
    y = data_rng.uniform(-2.0, 2.0, size=batch)
    # push the random init away from the flat zero-bias start so every path carries gradient
    for name, p in model.params.items():
        p += data_rng.uniform(-0.5, 0.5, size=p.shape)
    sigmas = spectral_sigmas(model) if model.spectral else None

    def loss_at() -> float:
        return loss_and_grads(model, X, y, "train", RngStream(seed), trainable=frozenset(),
                              sigmas=sigmas)[0]

    _, grads = loss_and_grads(model, X, y, "train", RngStream(seed), sigmas=sigmas)
    worst = (0.0, "", ())
    count = 0
    for name, p in model.params.items():
        def f(theta, p=p):
            saved = p.copy()
            p[...] = theta
            try:
                return loss_at()
            finally:
                p[...] = saved
        fd = nx.finite_difference_gradient(f, p.copy(), h)
        err = nx.relative_error(grads[name], fd)
        count += err.size
        i = np.unravel_index(int(np.argmax(err)), err.shape)
        if err[i] > worst[0] or not worst[1]:
            worst = (float(err[i]), name, tuple(int(j) for j in i))
    return GradCheckResult(worst[0] < tolerance, worst[0], worst[1], worst[2], count)
