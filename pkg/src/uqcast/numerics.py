"""Dense 2-D arrays with a define-by-run reverse-mode tape.

Every value is a 64-bit ``numpy`` array of rank 2 (vectors are ``n x 1``
columns, or ``1 x n`` rows when used as per-sample biases).  Operations on
:class:`Var` objects are appended to the owning :class:`Tape` in execution
order, so the node list is topologically sorted by construction.  Vector-
Jacobian rules live in :data:`VJP_RULES`, keyed by operation name, and are
looked up at backward time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_matrix(x) -> Matrix:
    """Coerce scalars / 1-D / 2-D input into a float64 matrix (1-D -> column)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    return value


class Var:
    """A node on a tape: a cached forward value plus its provenance."""

    __slots__ = ("value", "tape", "op", "parents", "ctx", "requires_grad", "name", "index")

    def __init__(self, value, tape, op="leaf", parents=(), ctx=None,
                 requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var<{self.op}{label} {self.value.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, value, name=None, requires_grad=True) -> Var:
        v = _check_finite(as_matrix(value), "leaf")
        return Var(v, self, "leaf", requires_grad=requires_grad, name=name)

    def constant(self, value) -> Var:
        return Var(as_matrix(value), self, "const")

    def __len__(self):
        return len(self.nodes)


def _tape_of(operands) -> Tape:
    for o in operands:
        if isinstance(o, Var):
            return o.tape
    return Tape()


def _lift(x, tape: Tape) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _record(op: str, value: np.ndarray, parents: Sequence[Var], ctx=None) -> Var:
    value = _check_finite(value, op)
    tape = parents[0].tape
    rg = any(p.requires_grad for p in parents)
    return Var(value, tape, op, tuple(parents), ctx, requires_grad=rg)


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    # only size-1 axes may stretch; anything else is a caller bug
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _binary(op, a, b):
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a.shape, b.shape, op)
    return a, b


# ---------------------------------------------------------------- operations


def add(a, b) -> Var:
    a, b = _binary("add", a, b)
    return _record("add", a.value + b.value, (a, b))


def sub(a, b) -> Var:
    a, b = _binary("sub", a, b)
    return _record("sub", a.value - b.value, (a, b))


def hadamard(a, b) -> Var:
    a, b = _binary("hadamard", a, b)
    return _record("hadamard", a.value * b.value, (a, b))


def div(a, b) -> Var:
    a, b = _binary("div", a, b)
    if np.any(b.value == 0.0):
        raise ZeroDivisionError("div: zero entry in denominator")
    return _record("div", a.value / b.value, (a, b))


def scale(a, c: float) -> Var:
    tape = _tape_of((a,))
    a = _lift(a, tape)
    return _record("scale", a.value * c, (a,), float(c))


def matmul(a, b) -> Var:
    tape = _tape_of((a, b))
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _record("matmul", a.value @ b.value, (a, b))


def transpose(a) -> Var:
    tape = _tape_of((a,))
    a = _lift(a, tape)
    return _record("transpose", a.value.T.copy(), (a,))


def tanh(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), out)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    out = _stable_sigmoid(a.value)
    return _record("sigmoid", out, (a,), out)


def leaky_relu(a, alpha: float = 0.3) -> Var:
    a = _lift(a, _tape_of((a,)))
    slope = np.where(a.value > 0, 1.0, alpha)
    return _record("leaky_relu", a.value * slope, (a,), slope)


def exp(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    out = np.exp(a.value)
    return _record("exp", out, (a,), out)


def log(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive entry")
    return _record("log", np.log(a.value), (a,))


def square(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    return _record("square", a.value * a.value, (a,))


def sqrt(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    if np.any(a.value <= 0):
        raise ValueError("sqrt: non-positive entry")
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), out)


def clip(a, lo: float, hi: float) -> Var:
    a = _lift(a, _tape_of((a,)))
    inside = (a.value >= lo) & (a.value <= hi)
    return _record("clip", np.clip(a.value, lo, hi), (a,), inside)


def concat_cols(parts: Sequence) -> Var:
    tape = _tape_of(parts)
    parts = [_lift(p, tape) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    return _record("concat_cols", np.concatenate([p.value for p in parts], axis=1),
                   parts, np.cumsum([0] + widths))


def slice_cols(a, start: int, stop: int) -> Var:
    a = _lift(a, _tape_of((a,)))
    return _record("slice_cols", a.value[:, start:stop].copy(), (a,), (start, stop))


def sum_all(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    return _record("sum_all", np.array([[a.value.sum()]]), (a,))


def mean_all(a) -> Var:
    a = _lift(a, _tape_of((a,)))
    return _record("mean_all", np.array([[a.value.mean()]]), (a,))


def row_mean(a) -> Var:
    """Mean across columns, keeping a ``(rows, 1)`` result."""
    a = _lift(a, _tape_of((a,)))
    return _record("row_mean", a.value.mean(axis=1, keepdims=True), (a,))


# ------------------------------------------------------- vector-Jacobian rules


def _vjp_add(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_sub(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_hadamard(node, g):
    a, b = node.parents
    return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)


def _vjp_div(node, g):
    a, b = node.parents
    return (_unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape))


def _vjp_matmul(node, g):
    a, b = node.parents
    return g @ b.value.T, a.value.T @ g


def _vjp_concat(node, g):
    cuts = node.ctx
    return tuple(g[:, cuts[i]:cuts[i + 1]] for i in range(len(cuts) - 1))


def _vjp_slice(node, g):
    (a,) = node.parents
    start, stop = node.ctx
    out = np.zeros_like(a.value)
    out[:, start:stop] = g
    return (out,)


VJP_RULES: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "hadamard": _vjp_hadamard,
    "div": _vjp_div,
    "scale": lambda node, g: (g * node.ctx,),
    "matmul": _vjp_matmul,
    "transpose": lambda node, g: (g.T,),
    "tanh": lambda node, g: (g * (1.0 - node.ctx * node.ctx),),
    "sigmoid": lambda node, g: (g * node.ctx * (1.0 - node.ctx),),
    "leaky_relu": lambda node, g: (g * node.ctx,),
    "exp": lambda node, g: (g * node.ctx,),
    "log": lambda node, g: (g / node.parents[0].value,),
    "square": lambda node, g: (2.0 * g * node.parents[0].value,),
    "sqrt": lambda node, g: (g * 0.5 / node.ctx,),
    "clip": lambda node, g: (g * node.ctx,),
    "concat_cols": _vjp_concat,
    "slice_cols": _vjp_slice,
    "sum_all": lambda node, g: (np.full(node.parents[0].shape, g[0, 0]),),
    "mean_all": lambda node, g: (np.full(node.parents[0].shape, g[0, 0] / node.parents[0].value.size),),
    "row_mean": lambda node, g: (np.repeat(g / node.parents[0].shape[1], node.parents[0].shape[1], axis=1),),
}

_UNARY = {
    "tanh": tanh, "sigmoid": sigmoid, "leaky_relu": leaky_relu, "exp": exp,
    "log": log, "square": square, "sqrt": sqrt,
}
_BINARY = {"add": add, "sub": sub, "hadamard": hadamard, "div": div}


def elementwise(op: str, *operands, **kwargs) -> Var:
    """Dispatch a pointwise operation by name (``scale`` takes a factor)."""
    if op in _BINARY:
        if len(operands) != 2:
            raise TypeError(f"{op} takes two operands")
        return _BINARY[op](*operands)
    if op == "scale":
        return scale(*operands, **kwargs)
    if op in _UNARY:
        return _UNARY[op](*operands, **kwargs)
    raise KeyError(f"unknown elementwise op {op!r}")


def backward(root: Var) -> dict[Var, np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Gradients are accumulated for every node that requires them; leaf
    gradients are returned keyed by the leaf ``Var``.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[root.index] = np.ones_like(root.value)
    leaves: dict[Var, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads[node.index]
        if g is None or not node.requires_grad:
            continue
        if node.op == "leaf":
            leaves[node] = g
            continue
        pgrads = VJP_RULES[node.op](node, g)
        for parent, pg in zip(node.parents, pgrads):
            if not parent.requires_grad:
                continue
            if grads[parent.index] is None:
                grads[parent.index] = pg
            else:
                grads[parent.index] = grads[parent.index] + pg
    return leaves


def grad(root: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
    """Gradients of ``root`` for the given leaves (zeros when unreached)."""
    leaves = backward(root)
    return [leaves.get(v, np.zeros_like(v.value)) for v in wrt]


def finite_difference_gradient(f: Callable[[np.ndarray], float], theta, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(θ+h e_i) - f(θ-h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(theta)
        flat[i] = keep - h
        fm = f(theta)
        flat[i] = keep
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(theta.shape)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))


@dataclass
class RngStream:
    """Seeded PCG64 stream; equal seeds give bit-identical draws."""

    seed: int
    _gen: np.random.Generator = field(init=False, repr=False)
    _seq: np.random.SeedSequence = field(init=False, repr=False)

    def __post_init__(self):
        self._seq = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def keep_mask(self, shape, keep: float) -> np.ndarray:
        return (self._gen.random(shape) < keep).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def spawn(self, n: int) -> list["RngStream"]:
        """Child streams, reproducible from the parent seed and call order."""
        children = []
        for child in self._seq.spawn(n):
            s = RngStream.__new__(RngStream)
            s.seed = self.seed
            s._seq = child
            s._gen = np.random.Generator(np.random.PCG64(child))
            children.append(s)
        return children
